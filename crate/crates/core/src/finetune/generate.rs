use std::collections::BTreeMap;

use super::{AdapterSet, HypernetArtifact, LoraArtifact};
use crate::cli::{parse_prompt, DirectiveKind};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::networks::{AttentionHook, ModelBundle};
use crate::scheduler::{sample, NoiseSchedule, SamplerConfig};
use crate::tensor::RngStream;

/// Adapters that prompt directives may refer to, by name.
#[derive(Debug, Clone, Default)]
pub struct AdapterRegistry {
    pub lora: BTreeMap<String, LoraArtifact>,
    pub hypernet: BTreeMap<String, HypernetArtifact>,
}

impl AdapterRegistry {
    pub fn add_lora(&mut self, art: LoraArtifact) {
        self.lora.insert(art.name.clone(), art);
    }

    pub fn add_hypernet(&mut self, art: HypernetArtifact) {
        self.hypernet.insert(art.name.clone(), art);
    }

    fn available(&self) -> Vec<String> {
        self.lora
            .keys()
            .map(|k| format!("lora:{k}"))
            .chain(self.hypernet.keys().map(|k| format!("hypernet:{k}")))
            .collect()
    }

    /// Resolves a raw prompt into clean text plus the adapters it activates.
    pub fn resolve(&self, bundle: &ModelBundle, prompt: &str) -> Result<(String, AdapterSet)> {
        let (text, directives) = parse_prompt(prompt)?;
        let mut set = AdapterSet::default();
        for d in directives {
            let missing = || Error::UnknownAdapter {
                name: format!("{}:{}", d.kind, d.name),
                available: self.available(),
            };
            match d.kind {
                DirectiveKind::Lora => {
                    let art = self.lora.get(&d.name).ok_or_else(missing)?;
                    art.check_sites(bundle)?;
                    if set.lora.replace((art.clone(), d.weight)).is_some() {
                        return Err(Error::invalid("only one LoRA directive per prompt is supported"));
                    }
                }
                DirectiveKind::Hypernet => {
                    let art = self.hypernet.get(&d.name).ok_or_else(missing)?;
                    art.check_sites(bundle)?;
                    if set.hypernet.replace((art.clone(), d.weight)).is_some() {
                        return Err(Error::invalid("only one hypernetwork directive per prompt is supported"));
                    }
                }
            }
        }
        Ok((text, set))
    }
}

/// Text-to-image: `count` images for one prompt. Image `i` starts from the
/// noise of `rng.split(i)`, so draws pair up across models for a shared rng.
pub fn generate(
    bundle: &ModelBundle,
    schedule: &NoiseSchedule,
    prompt: &str,
    registry: &AdapterRegistry,
    sampler: &SamplerConfig,
    count: usize,
    rng: &RngStream,
) -> Result<Vec<Image>> {
    if count == 0 {
        return Err(Error::invalid("image count must be at least 1"));
    }
    let (text, adapters) = registry.resolve(bundle, prompt)?;
    let cond = bundle.tokenize(&text)?;
    let uncond = bundle.tokenize("")?;
    let cond = bundle.encode_text(&vec![cond; count])?;
    let uncond = bundle.encode_text(&vec![uncond; count])?;
    let hooks: [&dyn AttentionHook; 1] = [&adapters];
    let predictor = bundle.predictor(&hooks);
    let latents = sample(
        &predictor,
        schedule,
        &cond,
        &uncond,
        &bundle.config.latent_shape(),
        sampler,
        rng,
    )?;
    let inv = (1.0 / schedule.latent_scale()) as f32;
    let images = bundle.decode_latent(&latents.map(|v| v * inv))?;
    Image::from_batch(&images)
}
