use std::path::Path;

use sha2::{Digest, Sha256};

use super::{caption_tokens, parameter_digest, draw_batch, generate, run_loop, AdapterRegistry, AdapterSet, StepReport, TrainConfig, TrainableSelector};
use crate::cli::write_atomic;
use crate::data::{load_corpus, normalize_caption, Corpus, Image, ImageTextPair};
use crate::error::{Error, Result};
use crate::networks::ModelBundle;
use crate::scheduler::{NoiseSchedule, SamplerConfig};
use crate::tensor::RngStream;

/// Rare-token fine-tuning setup with prior preservation.
#[derive(Debug, Clone, PartialEq)]
pub struct DreamboothRun {
    pub instance_token: String,
    pub class_token: String,
    pub class_images: Corpus,
    pub prior_weight: f64,
    pub train_text: bool,
}

impl DreamboothRun {
    pub fn instance_prompt(&self) -> String {
        format!("a {} {}", self.instance_token, self.class_token)
    }

    pub fn class_prompt(&self) -> String {
        format!("a {}", self.class_token)
    }
}

fn cache_key(bundle: &ModelBundle, class_prompt: &str, count: usize, sampler: &SamplerConfig, rng: &RngStream) -> Result<String> {
    let mut h = Sha256::new();
    for (name, d) in parameter_digest(&bundle.params) {
        h.update(name.as_bytes());
        h.update(d);
    }
    h.update(bundle.vocab.tokens().join("\n").as_bytes());
    let model: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let key = serde_json::json!({
        "prompt": class_prompt,
        "count": count,
        "sampler": sampler,
        "seed": rng.seed(),
        "stream": rng.stream_id(),
        "counter": rng.counter().to_string(),
        "model": model,
    });
    Ok(serde_json::to_string_pretty(&key)? + "\n")
}

const CACHE_KEY_FILE: &str = "class_images.json";

/// Samples `count` class images from the frozen base model, quantized to
/// 8 bits as they are stored. With a cache directory, a set made there by
/// the same model, prompt, sampler and stream is reused; otherwise a fresh
/// set is written there.
pub fn db_generate_class_images(
    bundle: &ModelBundle,
    schedule: &NoiseSchedule,
    class_prompt: &str,
    count: usize,
    sampler: &SamplerConfig,
    rng: &RngStream,
    cache: Option<&Path>,
) -> Result<Corpus> {
    if count == 0 {
        return Err(Error::invalid("class image count must be at least 1"));
    }
    bundle.require_trained()?;
    let caption = normalize_caption(class_prompt);
    let key = cache_key(bundle, class_prompt, count, sampler, rng)?;
    if let Some(dir) = cache {
        let stored = std::fs::read_to_string(dir.join(CACHE_KEY_FILE)).ok();
        if stored.as_deref() == Some(key.as_str()) {
            if let Ok(c) = load_corpus(dir, bundle.config.resolution) {
                if c.len() == count && c.pairs.iter().all(|p| p.caption == caption) {
                    return Ok(c);
                }
            }
        }
    }
    let registry = AdapterRegistry::default();
    let images: Vec<Image> = generate(bundle, schedule, class_prompt, &registry, sampler, count, rng)?;
    let corpus = Corpus {
        pairs: images
            .into_iter()
            .enumerate()
            .map(|(i, image)| ImageTextPair {
                image: image.quantized(),
                caption: caption.clone(),
                source: format!("class_{i:04}"),
            })
            .collect(),
    };
    if let Some(dir) = cache {
        let _ = std::fs::remove_file(dir.join(CACHE_KEY_FILE));
        corpus.save(dir)?;
        write_atomic(&dir.join(CACHE_KEY_FILE), key.as_bytes())?;
    }
    Ok(corpus)
}

fn check_token(bundle: &ModelBundle, word: &str, what: &str) -> Result<()> {
    let n = word.split(|c: char| c == ',' || c.is_whitespace()).filter(|w| !w.is_empty()).count();
    if n != 1 || bundle.vocab.id(&word.to_lowercase()).is_none() {
        return Err(Error::invalid(format!("{what} `{word}` must be a single known token")));
    }
    Ok(())
}

/// Full-denoiser fine-tuning on instance images captioned with
/// `instance_prompt`, optionally with a prior-preservation batch per step.
#[allow(clippy::too_many_arguments)]
fn run(
    bundle: &mut ModelBundle,
    schedule: &NoiseSchedule,
    instances: &Corpus,
    instance_prompt: &str,
    prior: Option<(&Corpus, &str, f64)>,
    train_text: bool,
    cfg: &TrainConfig,
    rng: &RngStream,
    observe: impl FnMut(usize, &StepReport),
) -> Result<Vec<f64>> {
    bundle.require_trained()?;
    if instances.is_empty() {
        return Err(Error::invalid("instance corpus is empty"));
    }
    let sel = TrainableSelector::dreambooth(bundle, train_text);
    let mut adapters = AdapterSet::default();
    let losses = run_loop(bundle, &mut adapters, schedule, &sel, cfg, rng, observe, |bundle, s| {
        let idx = draw_batch(instances.len(), cfg.batch_size, &mut s.select);
        let caps = vec![instance_prompt.to_string(); idx.len()];
        let mut terms = vec![(instances.image_batch(&idx)?, caption_tokens(bundle, &caps)?, 1.0)];
        if let Some((class, prompt, weight)) = prior {
            let cidx = draw_batch(class.len(), cfg.batch_size, &mut s.aux);
            let caps = vec![prompt.to_string(); cidx.len()];
            terms.push((class.image_batch(&cidx)?, caption_tokens(bundle, &caps)?, weight));
        }
        Ok(terms)
    })?;
    bundle.denoiser_steps += cfg.steps as u64;
    Ok(losses)
}

/// Dreambooth: loss `L_instance + prior_weight * L_prior` per step.
pub fn db_train(
    bundle: &mut ModelBundle,
    schedule: &NoiseSchedule,
    instances: &Corpus,
    run_cfg: &DreamboothRun,
    cfg: &TrainConfig,
    rng: &RngStream,
    observe: impl FnMut(usize, &StepReport),
) -> Result<Vec<f64>> {
    check_token(bundle, &run_cfg.instance_token, "instance token")?;
    check_token(bundle, &run_cfg.class_token, "class token")?;
    if run_cfg.instance_token.eq_ignore_ascii_case(&run_cfg.class_token) {
        return Err(Error::invalid("instance and class tokens must differ"));
    }
    if run_cfg.class_images.is_empty() {
        return Err(Error::invalid("dreambooth needs generated class images"));
    }
    let class_prompt = run_cfg.class_prompt();
    run(
        bundle,
        schedule,
        instances,
        &run_cfg.instance_prompt(),
        Some((&run_cfg.class_images, &class_prompt, run_cfg.prior_weight)),
        run_cfg.train_text,
        cfg,
        rng,
        observe,
    )
}

/// Plain full-denoiser fine-tuning on the instance set, with the same stream
/// layout as [`db_train`].
pub fn finetune_instances(
    bundle: &mut ModelBundle,
    schedule: &NoiseSchedule,
    instances: &Corpus,
    instance_prompt: &str,
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    run(bundle, schedule, instances, instance_prompt, None, false, cfg, rng, |_, _| {})
}
