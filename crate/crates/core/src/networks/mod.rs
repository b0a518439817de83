//! VAE, text encoder and conditional denoiser over a shared named-parameter
//! registry, with hook points at every cross-attention site.

mod attention;
mod text;
mod unet;
mod vae;

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub use attention::AttentionSite;

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::scheduler::{timestep_embeddings, NoisePredictor};
use crate::tensor::{Graph, RngStream, Tensor, Var};

/// Named parameters; the single source of truth for every weight.
pub type ParamStore = BTreeMap<String, Tensor>;

/// Cross-attention site ids in forward order.
pub const SITES: [&str; 5] = ["down1", "down2", "mid", "up1", "up2"];

/// Latent grid is `resolution / VAE_FACTOR` on each side.
pub const VAE_FACTOR: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Image side length in pixels.
    pub resolution: usize,
    pub latent_channels: usize,
    /// VAE widths at full, half and quarter resolution.
    pub vae_channels: [usize; 3],
    pub d_txt: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub max_tokens: usize,
    pub d_model: usize,
    pub heads: usize,
    pub groups: usize,
    pub time_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            latent_channels: 4,
            vae_channels: [16, 32, 64],
            d_txt: 64,
            text_layers: 2,
            text_heads: 2,
            max_tokens: 16,
            d_model: 64,
            heads: 2,
            groups: 8,
            time_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.resolution == 0 || self.resolution % (VAE_FACTOR * 4) != 0 {
            return bad("resolution must be a positive multiple of 16");
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be divisible by heads");
        }
        if self.text_heads == 0 || self.d_txt % self.text_heads != 0 {
            return bad("d_txt must be divisible by text_heads");
        }
        if self.groups == 0 || self.d_model % self.groups != 0 {
            return bad("d_model must be divisible by groups");
        }
        if self.max_tokens < 2 || self.time_dim % 2 != 0 || self.latent_channels == 0 {
            return bad("max_tokens >= 2, even time_dim and latent_channels >= 1 required");
        }
        if self.vae_channels.contains(&0) || self.text_layers == 0 {
            return bad("layer widths and counts must be positive");
        }
        Ok(())
    }

    pub fn latent_side(&self) -> usize {
        self.resolution / VAE_FACTOR
    }

    /// `[h, w, c]` of one latent.
    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_side(), self.latent_side(), self.latent_channels]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

pub(crate) type Manifest = Vec<(String, Vec<usize>, Init)>;

/// 3x3 conv with fan-in scaled normal weights times `gain`; zero gain gives zeros.
pub(crate) fn push_conv(m: &mut Manifest, name: &str, cin: usize, cout: usize, gain: f64) {
    let init = if gain == 0.0 { Init::Zeros } else { Init::Normal(gain * (1.0 / (9 * cin) as f64).sqrt()) };
    m.push((format!("{name}.w"), vec![3, 3, cin, cout], init));
    m.push((format!("{name}.b"), vec![cout], Init::Zeros));
}

/// Weight `[d_in, d_out]` used as `x @ w`.
pub(crate) fn push_linear(m: &mut Manifest, name: &str, din: usize, dout: usize) {
    m.push((format!("{name}.w"), vec![din, dout], Init::Normal((1.0 / din as f64).sqrt())));
    m.push((format!("{name}.b"), vec![dout], Init::Zeros));
}

pub(crate) fn push_norm(m: &mut Manifest, name: &str, width: usize) {
    m.push((format!("{name}.g"), vec![width], Init::Ones));
    m.push((format!("{name}.b"), vec![width], Init::Zeros));
}

fn materialize(manifest: &Manifest, rng: &RngStream) -> ParamStore {
    manifest
        .iter()
        .enumerate()
        .map(|(i, (name, shape, init))| {
            let t = match *init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::ones(shape),
                Init::Normal(std) => rng.split(i as u64).normal_tensor(shape, std),
            };
            (name.clone(), t)
        })
        .collect()
}

/// Binds registry tensors into one [`Graph`], as trainable leaves when their
/// name is in the trainable set and as constants otherwise. A name binds to
/// the same node every time.
pub struct Binder<'g> {
    graph: &'g Graph,
    trainable: BTreeSet<String>,
    cache: RefCell<HashMap<String, Var>>,
}

impl<'g> Binder<'g> {
    pub fn new(graph: &'g Graph, trainable: BTreeSet<String>) -> Self {
        Self {
            graph,
            trainable,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn frozen(graph: &'g Graph) -> Self {
        Self::new(graph, BTreeSet::new())
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn bind(&self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.cache.borrow().get(name) {
            return v;
        }
        let v = if self.trainable.contains(name) {
            self.graph.param(name, value)
        } else {
            self.graph.constant(value)
        };
        self.cache.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn get(&self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        Ok(self.bind(name, t))
    }

    /// `conv3x3(x) + b`.
    pub(crate) fn conv(&self, p: &ParamStore, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.get(p, &format!("{name}.w"))?;
        let b = self.get(p, &format!("{name}.b"))?;
        let y = self.graph.conv2d(x, w, stride)?;
        self.graph.add(y, b)
    }

    /// `x @ w + b` with `w` stored `[d_in, d_out]`.
    pub(crate) fn linear(&self, p: &ParamStore, name: &str, x: Var) -> Result<Var> {
        let w = self.get(p, &format!("{name}.w"))?;
        let b = self.get(p, &format!("{name}.b"))?;
        let y = self.graph.matmul(x, w)?;
        self.graph.add(y, b)
    }

    pub(crate) fn affine(&self, p: &ParamStore, name: &str, x: Var) -> Result<Var> {
        let g = self.get(p, &format!("{name}.g"))?;
        let b = self.get(p, &format!("{name}.b"))?;
        let y = self.graph.mul(x, g)?;
        self.graph.add(y, b)
    }

    pub(crate) fn layer_norm(&self, p: &ParamStore, name: &str, x: Var) -> Result<Var> {
        let n = self.graph.layer_norm(x)?;
        self.affine(p, name, n)
    }

    pub(crate) fn group_norm(&self, p: &ParamStore, name: &str, x: Var, groups: usize) -> Result<Var> {
        let n = self.graph.group_norm(x, groups)?;
        self.affine(p, name, n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Self::Q, Self::K, Self::V, Self::O];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Q => "q",
            Self::K => "k",
            Self::V => "v",
            Self::O => "o",
        }
    }
}

/// Adapter hook into the denoiser's cross-attention sites. Both methods
/// default to leaving the site untouched.
pub trait AttentionHook {
    /// Extra term added to the product `x W^T` of projection `proj`.
    fn projection_delta(&self, _b: &Binder, _site: &str, _proj: Projection, _x: Var) -> Result<Option<Var>> {
        Ok(None)
    }

    /// Context fed to the key (`proj == K`) or value (`proj == V`) projection.
    fn transform_context(&self, _b: &Binder, _site: &str, _proj: Projection, ctx: Var) -> Result<Var> {
        Ok(ctx)
    }
}

/// Hooks active for one forward pass, applied in order.
pub type Hooks<'a> = [&'a dyn AttentionHook];

/// The three model components over one parameter registry, plus the
/// vocabulary that indexes the text encoder's embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    /// Optimizer steps applied to the VAE and the denoiser.
    pub vae_steps: u64,
    pub denoiser_steps: u64,
}

impl ModelBundle {
    /// Freshly initialized bundle; weights depend only on `rng`.
    pub fn new(config: ModelConfig, vocab: Vocab, rng: &RngStream) -> Result<Self> {
        config.validate()?;
        let mut params = materialize(&vae::manifest(&config), &rng.split(0));
        params.extend(materialize(&text::manifest(&config, vocab.len()), &rng.split(1)));
        params.extend(materialize(&unet::manifest(&config), &rng.split(2)));
        Ok(Self {
            config,
            vocab,
            params,
            vae_steps: 0,
            denoiser_steps: 0,
        })
    }

    /// Parameter names of one component: "vae", "text" or "unet".
    pub fn component_names(&self, component: &str) -> BTreeSet<String> {
        let prefix = format!("{component}.");
        self.params.keys().filter(|k| k.starts_with(&prefix)).cloned().collect()
    }

    pub fn sites(&self) -> Vec<AttentionSite> {
        SITES
            .iter()
            .map(|s| AttentionSite {
                id: s.to_string(),
                d_model: self.config.d_model,
                d_txt: self.config.d_txt,
                heads: self.config.heads,
            })
            .collect()
    }

    /// Weight-name prefix of a site's projections.
    pub fn site_prefix(site: &str) -> String {
        format!("unet.{site}.attn")
    }

    pub fn require_trained(&self) -> Result<()> {
        if self.vae_steps == 0 || self.denoiser_steps == 0 {
            return Err(Error::State(
                "bundle has not been pretrained (VAE and denoiser need training first)".into(),
            ));
        }
        Ok(())
    }

    pub fn vae_encode_var(&self, b: &Binder, images: Var) -> Result<(Var, Var)> {
        vae::encode(b, &self.params, images)
    }

    pub fn vae_decode_var(&self, b: &Binder, latents: Var) -> Result<Var> {
        vae::decode(b, &self.params, latents)
    }

    pub fn encode_text_var(&self, b: &Binder, ids: &[Vec<u32>]) -> Result<Var> {
        text::encode(b, &self.params, &self.config, ids)
    }

    pub fn predict_noise_var(&self, b: &Binder, latents: Var, temb: Var, ctx: Var, hooks: &Hooks) -> Result<Var> {
        unet::forward(b, &self.params, &self.config, latents, temb, ctx, hooks)
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[3] != 3 || s[1] != s[2] || s[1] % VAE_FACTOR != 0 {
            return Err(Error::invalid(format!(
                "images must be [B, H, H, 3] with H divisible by {VAE_FACTOR}, got {s:?}"
            )));
        }
        Ok(())
    }

    /// Mean and log-variance over the latent grid, `[B, H/4, W/4, c]` each.
    pub fn encode_image(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_images(images)?;
        let g = Graph::new();
        let b = Binder::frozen(&g);
        let x = g.constant(images);
        let (m, lv) = self.vae_encode_var(&b, x)?;
        Ok((g.value(m), g.value(lv)))
    }

    /// Images `[B, 4h, 4w, 3]` clamped to `[0, 1]`.
    pub fn decode_latent(&self, latents: &Tensor) -> Result<Tensor> {
        let s = latents.shape();
        if s.len() != 4 || s[3] != self.config.latent_channels {
            return Err(Error::shape(
                "decode_latent",
                s,
                &[0, 0, 0, self.config.latent_channels],
            ));
        }
        let g = Graph::new();
        let b = Binder::frozen(&g);
        let z = g.constant(latents);
        let y = self.vae_decode_var(&b, z)?;
        Ok(g.value(y).map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn tokenize(&self, prompt: &str) -> Result<Vec<u32>> {
        self.vocab.tokenize(prompt, self.config.max_tokens)
    }

    /// Context `[B, L_max, d_txt]` for a batch of token sequences.
    pub fn encode_text(&self, ids: &[Vec<u32>]) -> Result<Tensor> {
        let g = Graph::new();
        let b = Binder::frozen(&g);
        let v = self.encode_text_var(&b, ids)?;
        Ok(g.value(v))
    }

    /// One site's multi-head cross-attention on `x: [B, N, d_model]`.
    pub fn cross_attention(&self, site: &str, x: &Tensor, ctx: &Tensor, hooks: &Hooks) -> Result<Tensor> {
        if !SITES.contains(&site) {
            return Err(Error::invalid(format!("unknown attention site `{site}`")));
        }
        let g = Graph::new();
        let b = Binder::frozen(&g);
        let (xv, cv) = (g.constant(x), g.constant(ctx));
        let out = attention::cross_attention(&b, &self.params, site, self.config.heads, xv, cv, hooks)?;
        Ok(g.value(out))
    }

    /// Noise prediction with the shape of `latents`; `temb` is `[B, time_dim]`.
    pub fn predict_noise(&self, latents: &Tensor, temb: &Tensor, ctx: &Tensor, hooks: &Hooks) -> Result<Tensor> {
        let g = Graph::new();
        let b = Binder::frozen(&g);
        let out = self.predict_noise_var(&b, g.constant(latents), g.constant(temb), g.constant(ctx), hooks)?;
        Ok(g.value(out))
    }

    pub fn predictor<'a>(&'a self, hooks: &'a Hooks<'a>) -> Conditioned<'a> {
        Conditioned { bundle: self, hooks }
    }
}

/// `latent = mean + exp(logvar / 2) * eps`, one child stream per batch element.
pub fn sample_latent(mean: &Tensor, logvar: &Tensor, rng: &RngStream) -> Result<Tensor> {
    if mean.shape() != logvar.shape() {
        return Err(Error::shape("sample_latent", mean.shape(), logvar.shape()));
    }
    let batch = mean.shape()[0];
    let per = mean.numel() / batch;
    let mut eps = Vec::with_capacity(mean.numel());
    for i in 0..batch {
        let mut r = rng.split(i as u64);
        eps.extend((0..per).map(|_| r.normal() as f32));
    }
    let eps = Tensor::new(mean.shape().to_vec(), eps)?;
    latent_from_noise(mean, logvar, &eps)
}

/// Reparameterization with explicit noise.
pub fn latent_from_noise(mean: &Tensor, logvar: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let std = logvar.map(|v| (0.5 * v).exp());
    let scaled = std.zip_map(eps, "sample_latent", |s, e| s * e)?;
    mean.zip_map(&scaled, "sample_latent", |m, s| m + s)
}

/// A bundle with a fixed hook set, usable by the sampler.
pub struct Conditioned<'a> {
    bundle: &'a ModelBundle,
    hooks: &'a Hooks<'a>,
}

impl NoisePredictor for Conditioned<'_> {
    fn predict(&self, latents: &Tensor, timesteps: &[usize], context: &Tensor) -> Result<Tensor> {
        let temb = timestep_embeddings(timesteps, self.bundle.config.time_dim)?;
        self.bundle.predict_noise(latents, &temb, context, self.hooks)
    }
}
