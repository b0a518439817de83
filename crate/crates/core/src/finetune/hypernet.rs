use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{caption_tokens, draw_batch, run_loop, AdapterSet, StepReport, TrainConfig, TrainableSelector};
use crate::data::{Corpus, PromptTemplate};
use crate::error::{Error, Result};
use crate::networks::{Binder, ModelBundle, ParamStore, Projection, SITES};
use crate::scheduler::NoiseSchedule;
use crate::tensor::{RngStream, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HnActivation {
    #[serde(alias = "linear")]
    Identity,
    Relu,
    Silu,
}

impl FromStr for HnActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "identity" | "linear" => Ok(Self::Identity),
            "relu" => Ok(Self::Relu),
            "silu" | "swish" => Ok(Self::Silu),
            _ => Err(Error::invalid(format!("unknown hypernetwork activation `{s}`"))),
        }
    }
}

impl fmt::Display for HnActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::Relu => "relu",
            Self::Silu => "silu",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HnInit {
    Normal,
    ZeroFinal,
}

/// Residual MLPs on the key and value context of every cross-attention site.
#[derive(Debug, Clone, PartialEq)]
pub struct HypernetArtifact {
    pub name: String,
    pub multipliers: Vec<f64>,
    pub activation: HnActivation,
    pub residual: bool,
    /// `hypernet.<site>.<k|v>.l<i>.{w,b}`, weights `[d_in, d_out]`.
    pub params: ParamStore,
}

fn widths(multipliers: &[f64], d: usize) -> Result<Vec<usize>> {
    if multipliers.len() < 2 || multipliers[0] != 1.0 || *multipliers.last().expect("len") != 1.0 {
        return Err(Error::invalid(format!(
            "hypernetwork layer structure {multipliers:?} must start and end with 1"
        )));
    }
    multipliers
        .iter()
        .map(|&m| {
            let w = (m * d as f64).round();
            if m > 0.0 && w >= 1.0 {
                Ok(w as usize)
            } else {
                Err(Error::invalid(format!("layer multiplier {m} gives no units")))
            }
        })
        .collect()
}

fn side(proj: Projection) -> &'static str {
    if proj == Projection::K {
        "k"
    } else {
        "v"
    }
}

/// Builds an artifact for every site of `bundle`. Normal init draws weights
/// from N(0, 0.01^2); zero-final additionally zeroes the last layer's weights.
pub fn hn_build(
    bundle: &ModelBundle,
    name: &str,
    multipliers: &[f64],
    activation: HnActivation,
    init: HnInit,
    rng: &RngStream,
) -> Result<HypernetArtifact> {
    let w = widths(multipliers, bundle.config.d_txt)?;
    let mut params = ParamStore::new();
    let mut k = 0u64;
    for site in SITES {
        for s in ["k", "v"] {
            for (i, pair) in w.windows(2).enumerate() {
                let last = i + 2 == w.len();
                let base = format!("hypernet.{site}.{s}.l{i}");
                let weight = if last && init == HnInit::ZeroFinal {
                    Tensor::zeros(&[pair[0], pair[1]])
                } else {
                    rng.split(k).normal_tensor(&[pair[0], pair[1]], 0.01)
                };
                k += 1;
                params.insert(format!("{base}.w"), weight);
                params.insert(format!("{base}.b"), Tensor::zeros(&[pair[1]]));
            }
        }
    }
    Ok(HypernetArtifact {
        name: name.to_string(),
        multipliers: multipliers.to_vec(),
        activation,
        residual: true,
        params,
    })
}

impl HypernetArtifact {
    pub fn layer_count(&self) -> usize {
        self.multipliers.len() - 1
    }

    /// Layer widths for one MLP, e.g. `[64, 128, 64]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::new();
        for i in 0..self.layer_count() {
            let s = self.params[&format!("hypernet.{}.k.l{i}.w", SITES[0])].shape();
            if i == 0 {
                w.push(s[0]);
            }
            w.push(s[1]);
        }
        w
    }

    pub fn check_sites(&self, bundle: &ModelBundle) -> Result<()> {
        let d = bundle.config.d_txt;
        for site in bundle.sites() {
            for s in ["k", "v"] {
                let first = format!("hypernet.{}.{s}.l0.w", site.id);
                match self.params.get(&first) {
                    Some(t) if t.shape()[0] == d => {}
                    _ => {
                        return Err(Error::invalid(format!(
                            "hypernetwork `{}` does not match site `{}` of this model",
                            self.name, site.id
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    /// Context for the key or value projection: `ctx + weight * MLP(ctx)`.
    pub(crate) fn apply(&self, b: &Binder, site: &str, proj: Projection, ctx: Var, weight: f64) -> Result<Var> {
        if weight == 0.0 || !matches!(proj, Projection::K | Projection::V) {
            return Ok(ctx);
        }
        let g = b.graph();
        let n = self.layer_count();
        let mut h = ctx;
        for i in 0..n {
            h = b.linear(&self.params, &format!("hypernet.{site}.{}.l{i}", side(proj)), h)?;
            if i + 1 < n {
                h = match self.activation {
                    HnActivation::Identity => h,
                    HnActivation::Relu => g.relu(h)?,
                    HnActivation::Silu => g.silu(h)?,
                };
            }
        }
        let branch = if self.residual { h } else { g.sub(h, ctx)? };
        let branch = if weight == 1.0 { branch } else { g.scale(branch, weight)? };
        g.add(ctx, branch)
    }
}

/// Trains only the hypernetwork on captions rendered through `template`
/// with the artifact name. The bundle is not modified.
#[allow(clippy::too_many_arguments)]
pub fn hn_train(
    bundle: &ModelBundle,
    schedule: &NoiseSchedule,
    corpus: &Corpus,
    artifact: HypernetArtifact,
    template: &PromptTemplate,
    cfg: &TrainConfig,
    rng: &RngStream,
    observe: impl FnMut(usize, &StepReport),
) -> Result<(HypernetArtifact, Vec<f64>)> {
    bundle.require_trained()?;
    artifact.check_sites(bundle)?;
    if corpus.is_empty() {
        return Err(Error::invalid("hypernetwork corpus is empty"));
    }
    let captions: Vec<String> = corpus
        .pairs
        .iter()
        .map(|p| template.render(p, &artifact.name))
        .collect::<Result<_>>()?;
    let sel = TrainableSelector::hypernetwork(&artifact);
    let mut work = bundle.clone();
    let mut adapters = AdapterSet {
        lora: None,
        hypernet: Some((artifact, 1.0)),
    };
    let losses = run_loop(&mut work, &mut adapters, schedule, &sel, cfg, rng, observe, |bundle, s| {
        let idx = draw_batch(corpus.len(), cfg.batch_size, &mut s.select);
        let caps: Vec<String> = idx.iter().map(|&i| captions[i].clone()).collect();
        Ok(vec![(corpus.image_batch(&idx)?, caption_tokens(bundle, &caps)?, 1.0)])
    })?;
    let (artifact, _) = adapters.hypernet.expect("still attached");
    Ok((artifact, losses))
}
