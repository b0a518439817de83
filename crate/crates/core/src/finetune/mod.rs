//! The shared diffusion training step and the personalization trainers, each
//! restricted to a declared parameter set.

mod dreambooth;
mod generate;
mod hypernet;
mod lora;
mod ti;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use dreambooth::{db_generate_class_images, db_train, finetune_instances, DreamboothRun};
pub use generate::{generate, AdapterRegistry};
pub use hypernet::{hn_build, hn_train, HnActivation, HnInit, HypernetArtifact};
pub use lora::{lora_attach, lora_merge, lora_train, merge_lora_into, LoraArtifact};
pub use ti::{apply_ti, ti_extend_vocab, ti_train, TiArtifact};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::networks::{AttentionHook, Binder, ModelBundle, ParamStore, Projection};
use crate::scheduler::{timestep_embeddings, NoiseSchedule, LATENT_SCALE};
use crate::tensor::{adam_step, mask_embedding_gradient, AdamConfig, AdamState, GradientMap, Graph, RngStream, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vae,
    Pretrain,
    TextualInversion,
    Dreambooth,
    Hypernetwork,
    Lora,
}

/// The parameters a method may update. Textual inversion additionally masks
/// the embedding-table gradient down to one row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableSelector {
    pub method: Method,
    pub names: BTreeSet<String>,
    pub embedding_row: Option<usize>,
}

impl TrainableSelector {
    pub fn vae(bundle: &ModelBundle) -> Self {
        Self::plain(Method::Vae, bundle.component_names("vae"))
    }

    pub fn pretrain(bundle: &ModelBundle) -> Self {
        Self::plain(Method::Pretrain, bundle.component_names("unet"))
    }

    pub fn dreambooth(bundle: &ModelBundle, train_text: bool) -> Self {
        let mut names = bundle.component_names("unet");
        if train_text {
            names.extend(bundle.component_names("text"));
        }
        Self::plain(Method::Dreambooth, names)
    }

    pub fn textual_inversion(row: usize) -> Self {
        Self {
            method: Method::TextualInversion,
            names: BTreeSet::from(["text.tok_emb".to_string()]),
            embedding_row: Some(row),
        }
    }

    pub fn hypernetwork(art: &HypernetArtifact) -> Self {
        Self::plain(Method::Hypernetwork, art.params.keys().cloned().collect())
    }

    pub fn lora(art: &LoraArtifact) -> Self {
        Self::plain(Method::Lora, art.params.keys().cloned().collect())
    }

    fn plain(method: Method, names: BTreeSet<String>) -> Self {
        Self {
            method,
            names,
            embedding_row: None,
        }
    }
}

/// LoRA and hypernetwork adapters active during a forward pass, each with the
/// weight its contribution is scaled by.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdapterSet {
    pub lora: Option<(LoraArtifact, f64)>,
    pub hypernet: Option<(HypernetArtifact, f64)>,
}

impl AdapterSet {
    fn store_of(&self, name: &str) -> Option<&ParamStore> {
        if name.starts_with("lora.") {
            self.lora.as_ref().map(|(a, _)| &a.params)
        } else if name.starts_with("hypernet.") {
            self.hypernet.as_ref().map(|(a, _)| &a.params)
        } else {
            None
        }
    }

    fn store_of_mut(&mut self, name: &str) -> Option<&mut ParamStore> {
        if name.starts_with("lora.") {
            self.lora.as_mut().map(|(a, _)| &mut a.params)
        } else if name.starts_with("hypernet.") {
            self.hypernet.as_mut().map(|(a, _)| &mut a.params)
        } else {
            None
        }
    }
}

impl AttentionHook for AdapterSet {
    fn projection_delta(&self, b: &Binder, site: &str, proj: Projection, x: Var) -> Result<Option<Var>> {
        match &self.lora {
            Some((art, w)) => art.delta(b, site, proj, x, *w),
            None => Ok(None),
        }
    }

    fn transform_context(&self, b: &Binder, site: &str, proj: Projection, ctx: Var) -> Result<Var> {
        match &self.hypernet {
            Some((art, w)) => art.apply(b, site, proj, ctx, *w),
            None => Ok(ctx),
        }
    }
}

fn lookup<'a>(bundle: &'a ModelBundle, adapters: &'a AdapterSet, name: &str) -> Option<&'a Tensor> {
    match adapters.store_of(name) {
        Some(s) => s.get(name),
        None => bundle.params.get(name),
    }
}

/// Adam state plus hyperparameters for one run.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Optimizer {
    pub fn new(lr: f64) -> Result<Self> {
        let config = AdamConfig::with_lr(lr);
        config.validate()?;
        Ok(Self {
            config,
            state: AdamState::new(),
        })
    }
}

/// One MSE term of the training loss: images with their captions.
#[derive(Debug, Clone, Copy)]
pub struct DiffusionTerm<'a> {
    pub images: &'a Tensor,
    pub tokens: &'a [Vec<u32>],
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub loss: f64,
    /// Gradients actually handed to the optimizer.
    pub grads: GradientMap,
}

/// Noisy latents, the noise drawn and the timesteps for one batch: VAE
/// encode, reparameterized sample, latent scaling, noise and per-sample
/// uniform timesteps. Term `rng` children: 0 latent sampling, 1 noise,
/// 2 timesteps.
pub fn noisy_batch(
    bundle: &ModelBundle,
    schedule: &NoiseSchedule,
    images: &Tensor,
    rng: &RngStream,
) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let s = images.shape();
    let r = bundle.config.resolution;
    if s.len() != 4 || s[1] != r || s[2] != r || s[3] != 3 {
        return Err(Error::invalid(format!("training images must be [B, {r}, {r}, 3], got {s:?}")));
    }
    let (mean, logvar) = bundle.encode_image(images)?;
    let latents = crate::networks::sample_latent(&mean, &logvar, &rng.split(0))?;
    let scale = schedule.latent_scale() as f32;
    let latents = latents.map(|v| v * scale);
    let eps = rng.split(1).normal_tensor(latents.shape(), 1.0);
    let mut tr = rng.split(2);
    let t: Vec<usize> = (0..s[0]).map(|_| tr.below(schedule.train_timesteps())).collect();
    let noisy = schedule.add_noise(&latents, &eps, &t)?;
    Ok((noisy, eps, t))
}

fn term_loss(
    b: &Binder,
    bundle: &ModelBundle,
    adapters: &AdapterSet,
    schedule: &NoiseSchedule,
    term: &DiffusionTerm,
    rng: &RngStream,
) -> Result<Var> {
    let g = b.graph();
    if term.tokens.len() != term.images.shape()[0] {
        return Err(Error::invalid("each training image needs exactly one caption"));
    }
    let (noisy, eps, t) = noisy_batch(bundle, schedule, term.images, rng)?;
    let ctx = bundle.encode_text_var(b, term.tokens)?;
    let temb = g.constant(&timestep_embeddings(&t, bundle.config.time_dim)?);
    let hooks: [&dyn AttentionHook; 1] = [adapters];
    let pred = bundle.predict_noise_var(b, g.constant(&noisy), temb, ctx, &hooks)?;
    g.mse(pred, g.constant(&eps))
}

fn check_selector(bundle: &ModelBundle, adapters: &AdapterSet, sel: &TrainableSelector) -> Result<()> {
    if sel.names.is_empty() {
        return Err(Error::invalid("trainable selector is empty"));
    }
    for n in &sel.names {
        if lookup(bundle, adapters, n).is_none() {
            return Err(Error::UnknownParameter(n.clone()));
        }
    }
    Ok(())
}

fn nonfinite_at(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { step },
        other => other,
    }
}

/// Applies restricted, masked gradients with Adam to the selected parameters.
fn apply_update(
    bundle: &mut ModelBundle,
    adapters: &mut AdapterSet,
    sel: &TrainableSelector,
    mut grads: GradientMap,
    opt: &mut Optimizer,
) -> Result<GradientMap> {
    grads.retain(|k, _| sel.names.contains(k));
    if let Some(row) = sel.embedding_row {
        if let Some(g) = grads.get_mut("text.tok_emb") {
            *g = mask_embedding_gradient(g, row)?;
        }
    }
    let mut current: BTreeMap<String, Tensor> = grads
        .keys()
        .map(|k| (k.clone(), lookup(bundle, adapters, k).expect("validated").clone()))
        .collect();
    adam_step(&mut current, &grads, &mut opt.state, &opt.config)?;
    for (k, v) in current {
        match adapters.store_of_mut(&k) {
            Some(s) => s.insert(k, v),
            None => bundle.params.insert(k, v),
        };
    }
    Ok(grads)
}

/// One optimizer step on `sum_k weight_k * MSE_k`. Term `k` draws its
/// randomness from `rng.split(k)`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    bundle: &mut ModelBundle,
    adapters: &mut AdapterSet,
    schedule: &NoiseSchedule,
    terms: &[DiffusionTerm],
    sel: &TrainableSelector,
    opt: &mut Optimizer,
    rng: &RngStream,
    step: usize,
) -> Result<StepReport> {
    check_selector(bundle, adapters, sel)?;
    if terms.is_empty() {
        return Err(Error::invalid("training step needs at least one batch"));
    }
    let g = Graph::new();
    let b = Binder::new(&g, sel.names.clone());
    let mut total: Option<Var> = None;
    for (k, term) in terms.iter().enumerate() {
        let l = term_loss(&b, bundle, adapters, schedule, term, &rng.split(k as u64)).map_err(nonfinite_at(step))?;
        let l = g.scale(l, term.weight).map_err(nonfinite_at(step))?;
        total = Some(match total {
            Some(t) => g.add(t, l).map_err(nonfinite_at(step))?,
            None => l,
        });
    }
    let total = total.expect("nonempty");
    let loss = g.value(total).item() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    let grads = g.backward(total).map_err(nonfinite_at(step))?;
    let grads = apply_update(bundle, adapters, sel, grads, opt)?;
    Ok(StepReport { loss, grads })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch_size: 4,
            lr: 1e-3,
        }
    }
}

/// `batch` distinct indices below `n` (all of them, shuffled, when `batch >= n`).
pub fn draw_batch(n: usize, batch: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut p = rng.permutation(n);
    p.truncate(batch.max(1).min(n));
    p
}

/// Per-step stream layout shared by every trainer: `split(step)` then
/// child 0 for the loss terms, 1 for batch selection, 2 for the auxiliary
/// batch and 3 for caption dropout.
pub(crate) struct StepStreams {
    pub terms: RngStream,
    pub select: RngStream,
    pub aux: RngStream,
    pub dropout: RngStream,
}

pub(crate) fn step_streams(rng: &RngStream, step: usize) -> StepStreams {
    let s = rng.split(step as u64);
    StepStreams {
        terms: s.split(0),
        select: s.split(1),
        aux: s.split(2),
        dropout: s.split(3),
    }
}

/// Generic loop: each step gets fresh streams, builds its terms and takes
/// one optimizer step.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_loop<F>(
    bundle: &mut ModelBundle,
    adapters: &mut AdapterSet,
    schedule: &NoiseSchedule,
    sel: &TrainableSelector,
    cfg: &TrainConfig,
    rng: &RngStream,
    mut observe: impl FnMut(usize, &StepReport),
    mut make_terms: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&ModelBundle, &mut StepStreams) -> Result<Vec<(Tensor, Vec<Vec<u32>>, f64)>>,
{
    check_selector(bundle, adapters, sel)?;
    let mut opt = Optimizer::new(cfg.lr)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut streams = step_streams(rng, step);
        let owned = make_terms(bundle, &mut streams)?;
        let terms: Vec<DiffusionTerm> = owned
            .iter()
            .map(|(images, tokens, weight)| DiffusionTerm {
                images,
                tokens,
                weight: *weight,
            })
            .collect();
        let report = train_step(bundle, adapters, schedule, &terms, sel, &mut opt, &streams.terms, step + 1)?;
        observe(step, &report);
        losses.push(report.loss);
    }
    Ok(losses)
}

/// Tokenized captions for the selected corpus items.
pub(crate) fn caption_tokens(bundle: &ModelBundle, captions: &[String]) -> Result<Vec<Vec<u32>>> {
    captions.iter().map(|c| bundle.tokenize(c)).collect()
}

/// Denoiser pretraining on a captioned corpus. `uncond_prob` of the captions
/// are replaced by the empty prompt. VAE and text encoder stay frozen.
pub fn pretrain(
    bundle: &mut ModelBundle,
    schedule: &NoiseSchedule,
    corpus: &Corpus,
    cfg: &TrainConfig,
    uncond_prob: f64,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::invalid("pretraining corpus is empty"));
    }
    if bundle.vae_steps == 0 {
        return Err(Error::State("VAE must be pretrained before the denoiser".into()));
    }
    let sel = TrainableSelector::pretrain(bundle);
    let mut adapters = AdapterSet::default();
    let losses = run_loop(bundle, &mut adapters, schedule, &sel, cfg, rng, |_, _| {}, |bundle, s| {
        let idx = draw_batch(corpus.len(), cfg.batch_size, &mut s.select);
        let captions: Vec<String> = idx
            .iter()
            .map(|&i| {
                if s.dropout.uniform() < uncond_prob {
                    String::new()
                } else {
                    corpus.pairs[i].caption_text()
                }
            })
            .collect();
        Ok(vec![(corpus.image_batch(&idx)?, caption_tokens(bundle, &captions)?, 1.0)])
    })?;
    bundle.denoiser_steps += cfg.steps as u64;
    Ok(losses)
}

/// VAE pretraining: reconstruction MSE plus `kl_weight` times the
/// per-element KL divergence of the scaled latent to a standard normal.
pub fn pretrain_vae(
    bundle: &mut ModelBundle,
    corpus: &Corpus,
    cfg: &TrainConfig,
    kl_weight: f64,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::invalid("VAE corpus is empty"));
    }
    let sel = TrainableSelector::vae(bundle);
    let mut adapters = AdapterSet::default();
    let mut opt = Optimizer::new(cfg.lr)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut s = step_streams(rng, step);
        let idx = draw_batch(corpus.len(), cfg.batch_size, &mut s.select);
        let images = corpus.image_batch(&idx)?;
        let g = Graph::new();
        let b = Binder::new(&g, sel.names.clone());
        let run = || -> Result<Var> {
            let x = g.constant(&images);
            let (mean, logvar) = bundle.vae_encode_var(&b, x)?;
            let shape = g.shape(mean);
            let mut er = s.terms.clone();
            let eps = g.constant(&er.normal_tensor(&shape, 1.0));
            let std = g.exp(g.scale(logvar, 0.5)?)?;
            let z = g.add(mean, g.mul(std, eps)?)?;
            let recon = bundle.vae_decode_var(&b, z)?;
            let rec = g.mse(recon, x)?;
            let mean = g.scale(mean, LATENT_SCALE)?;
            let logvar = g.add_scalar(logvar, 2.0 * LATENT_SCALE.ln())?;
            let kl = g.add_scalar(g.sub(g.add(g.square(mean)?, g.exp(logvar)?)?, logvar)?, -1.0)?;
            let kl = g.scale(g.mean_all(kl)?, 0.5 * kl_weight)?;
            g.add(rec, kl)
        };
        let total = run().map_err(nonfinite_at(step + 1))?;
        let loss = g.value(total).item() as f64;
        let grads = g.backward(total).map_err(nonfinite_at(step + 1))?;
        apply_update(bundle, &mut adapters, &sel, grads, &mut opt)?;
        losses.push(loss);
    }
    bundle.vae_steps += cfg.steps as u64;
    Ok(losses)
}

/// SHA-256 of every named tensor's shape and bytes.
pub fn parameter_digest(store: &ParamStore) -> BTreeMap<String, [u8; 32]> {
    store
        .iter()
        .map(|(k, t)| {
            let mut h = Sha256::new();
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
            (k.clone(), h.finalize().into())
        })
        .collect()
}

/// Names whose digest differs between two audits (including added or removed names).
pub fn changed_parameters(before: &BTreeMap<String, [u8; 32]>, after: &BTreeMap<String, [u8; 32]>) -> BTreeSet<String> {
    let mut out: BTreeSet<String> = before
        .iter()
        .filter(|(k, v)| after.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect();
    out.extend(after.keys().filter(|k| !before.contains_key(*k)).cloned());
    out
}

/// Median of a loss slice.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
