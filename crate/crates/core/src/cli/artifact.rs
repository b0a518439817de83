use std::path::Path;

use super::Checkpoint;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::finetune::{HnActivation, HypernetArtifact, LoraArtifact, TiArtifact};
use crate::networks::{ModelBundle, ModelConfig};
use crate::tensor::RngStream;

fn expect_kind(c: &Checkpoint, kind: &str) -> Result<()> {
    let found = c.meta_str("kind")?;
    if found != kind {
        return Err(Error::CorruptHeader(format!("expected a `{kind}` container, found `{found}`")));
    }
    Ok(())
}

/// Full model: every parameter plus config, vocabulary and training counters.
pub fn bundle_checkpoint(bundle: &ModelBundle) -> Result<Checkpoint> {
    Ok(Checkpoint::new(bundle.params.clone())
        .with_meta("kind", "bundle")
        .with_meta("config", serde_json::to_value(&bundle.config)?)
        .with_meta("vocab", bundle.vocab.tokens().to_vec())
        .with_meta("vocab_base_size", bundle.vocab.base_size())
        .with_meta("vae_steps", bundle.vae_steps)
        .with_meta("denoiser_steps", bundle.denoiser_steps))
}

/// Rebuilds a bundle, requiring exactly the parameter names and shapes the
/// stored config and vocabulary imply.
pub fn bundle_from_checkpoint(c: &Checkpoint) -> Result<ModelBundle> {
    expect_kind(c, "bundle")?;
    let config: ModelConfig = c.meta_as("config")?;
    config.validate()?;
    let tokens: Vec<String> = c.meta_as("vocab")?;
    let vocab = Vocab::from_tokens(tokens, c.meta_u64("vocab_base_size")? as usize)?;
    let mut bundle = ModelBundle::new(config, vocab, &RngStream::new(0, 0))?;
    if bundle.params.len() != c.tensors.len() {
        return Err(Error::CorruptHeader(format!(
            "model needs {} tensors, container has {}",
            bundle.params.len(),
            c.tensors.len()
        )));
    }
    for (name, slot) in bundle.params.iter_mut() {
        let t = c.tensors.get(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        if t.shape() != slot.shape() {
            return Err(Error::shape("bundle_from_checkpoint", t.shape(), slot.shape()));
        }
        *slot = t.clone();
    }
    bundle.vae_steps = c.meta_u64("vae_steps")?;
    bundle.denoiser_steps = c.meta_u64("denoiser_steps")?;
    Ok(bundle)
}

/// One tensor named by the placeholder word, plus its token id.
pub fn ti_checkpoint(art: &TiArtifact) -> Checkpoint {
    let mut c = Checkpoint::default()
        .with_meta("kind", "ti")
        .with_meta("token_id", art.token_id);
    c.tensors.insert(art.placeholder.clone(), art.vector.clone());
    c
}

pub fn ti_from_checkpoint(c: &Checkpoint) -> Result<TiArtifact> {
    expect_kind(c, "ti")?;
    let mut it = c.tensors.iter();
    let (Some((placeholder, vector)), None) = (it.next(), it.next()) else {
        return Err(Error::CorruptHeader("a TI container holds exactly one tensor".into()));
    };
    if vector.shape().len() != 2 || vector.shape()[0] != 1 {
        return Err(Error::CorruptHeader("TI vector must be [1, d]".into()));
    }
    Ok(TiArtifact {
        placeholder: placeholder.clone(),
        token_id: u32::try_from(c.meta_u64("token_id")?).map_err(|_| Error::CorruptHeader("token id out of range".into()))?,
        vector: vector.clone(),
    })
}

pub fn lora_checkpoint(art: &LoraArtifact) -> Checkpoint {
    Checkpoint::new(art.params.clone())
        .with_meta("kind", "lora")
        .with_meta("name", art.name.clone())
        .with_meta("rank", art.rank)
        .with_meta("alpha", art.alpha)
}

pub fn lora_from_checkpoint(c: &Checkpoint) -> Result<LoraArtifact> {
    expect_kind(c, "lora")?;
    if c.tensors.keys().any(|k| !k.starts_with("lora.")) {
        return Err(Error::CorruptHeader("LoRA container holds foreign tensors".into()));
    }
    Ok(LoraArtifact {
        name: c.meta_str("name")?.to_string(),
        rank: c.meta_u64("rank")? as usize,
        alpha: c.meta_f64("alpha")?,
        params: c.tensors.clone(),
    })
}

pub fn hypernet_checkpoint(art: &HypernetArtifact) -> Checkpoint {
    Checkpoint::new(art.params.clone())
        .with_meta("kind", "hypernet")
        .with_meta("name", art.name.clone())
        .with_meta("multipliers", art.multipliers.clone())
        .with_meta("activation", art.activation.to_string())
        .with_meta("residual", art.residual)
}

pub fn hypernet_from_checkpoint(c: &Checkpoint) -> Result<HypernetArtifact> {
    expect_kind(c, "hypernet")?;
    if c.tensors.keys().any(|k| !k.starts_with("hypernet.")) {
        return Err(Error::CorruptHeader("hypernetwork container holds foreign tensors".into()));
    }
    let multipliers: Vec<f64> = c.meta_as("multipliers")?;
    if multipliers.len() < 2 {
        return Err(Error::CorruptHeader("hypernetwork needs at least two layer multipliers".into()));
    }
    let activation: HnActivation = c.meta_str("activation")?.parse()?;
    Ok(HypernetArtifact {
        name: c.meta_str("name")?.to_string(),
        multipliers,
        activation,
        residual: c.meta_as("residual")?,
        params: c.tensors.clone(),
    })
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    bundle_checkpoint(bundle)?.save(path)
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    bundle_from_checkpoint(&Checkpoint::load(path)?)
}
