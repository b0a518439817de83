use super::{caption_tokens, draw_batch, run_loop, AdapterSet, StepReport, TrainConfig, TrainableSelector};
use crate::data::{Corpus, PromptTemplate};
use crate::error::{Error, Result};
use crate::networks::{Binder, ModelBundle, ParamStore, Projection};
use crate::scheduler::NoiseSchedule;
use crate::tensor::{RngStream, Tensor, Var};

/// Low-rank deltas for the four projections of every cross-attention site.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraArtifact {
    pub name: String,
    pub rank: usize,
    pub alpha: f64,
    /// `lora.<site>.<q|k|v|o>.A` `[r, d_in]` and `.B` `[d_out, r]`.
    pub params: ParamStore,
}

fn key(site: &str, proj: Projection, m: &str) -> String {
    format!("lora.{site}.{}.{m}", proj.as_str())
}

fn projection_weight(site: &str, proj: Projection) -> String {
    format!("{}.w{}", ModelBundle::site_prefix(site), proj.as_str())
}

/// Attaches rank-`rank` adapters with `A ~ N(0, a_std^2)` and `B = 0`, so
/// the adapted model starts out identical to the base.
pub fn lora_attach(bundle: &ModelBundle, name: &str, rank: usize, alpha: f64, a_std: f64, rng: &RngStream) -> Result<LoraArtifact> {
    if rank == 0 {
        return Err(Error::invalid("LoRA rank must be at least 1"));
    }
    if !(alpha.is_finite() && a_std.is_finite() && a_std >= 0.0) {
        return Err(Error::invalid("LoRA alpha and init scale must be finite"));
    }
    let mut params = ParamStore::new();
    let mut k = 0u64;
    for site in bundle.sites() {
        for proj in Projection::ALL {
            let w = &bundle.params[&projection_weight(&site.id, proj)];
            let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
            if rank > d_out.min(d_in) {
                return Err(Error::invalid(format!(
                    "LoRA rank {rank} exceeds min(d_out, d_in) = {} at {}.{}",
                    d_out.min(d_in),
                    site.id,
                    proj.as_str()
                )));
            }
            params.insert(key(&site.id, proj, "A"), rng.split(k).normal_tensor(&[rank, d_in], a_std));
            params.insert(key(&site.id, proj, "B"), Tensor::zeros(&[d_out, rank]));
            k += 1;
        }
    }
    Ok(LoraArtifact {
        name: name.to_string(),
        rank,
        alpha,
        params,
    })
}

impl LoraArtifact {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `weight * (alpha / r) * (x A^T) B^T`, or nothing at zero weight.
    pub(crate) fn delta(&self, b: &Binder, site: &str, proj: Projection, x: Var, weight: f64) -> Result<Option<Var>> {
        if weight == 0.0 {
            return Ok(None);
        }
        let g = b.graph();
        let a = b.get(&self.params, &key(site, proj, "A"))?;
        let bm = b.get(&self.params, &key(site, proj, "B"))?;
        let y = g.matmul_nt(g.matmul_nt(x, a)?, bm)?;
        let s = weight * self.scale();
        Ok(Some(if s == 1.0 { y } else { g.scale(y, s)? }))
    }

    pub fn check_sites(&self, bundle: &ModelBundle) -> Result<()> {
        for site in bundle.sites() {
            for proj in Projection::ALL {
                let w = &bundle.params[&projection_weight(&site.id, proj)];
                let ok = matches!(
                    (self.params.get(&key(&site.id, proj, "A")), self.params.get(&key(&site.id, proj, "B"))),
                    (Some(a), Some(bm)) if a.shape() == [self.rank, w.shape()[1]] && bm.shape() == [w.shape()[0], self.rank]
                );
                if !ok {
                    return Err(Error::invalid(format!(
                        "LoRA `{}` does not match site `{}` of this model",
                        self.name, site.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `W + scale * B A` for `W: [d_out, d_in]`, `A: [r, d_in]`, `B: [d_out, r]`.
pub fn lora_merge(w: &Tensor, a: &Tensor, b: &Tensor, scale: f64) -> Result<Tensor> {
    let (ws, as_, bs) = (w.shape(), a.shape(), b.shape());
    if ws.len() != 2 || as_.len() != 2 || bs.len() != 2 || as_[1] != ws[1] || bs[0] != ws[0] || bs[1] != as_[0] {
        return Err(Error::shape("lora_merge", ws, &[bs[0], as_[0], as_.get(1).copied().unwrap_or(0)]));
    }
    let (d_out, d_in, r) = (ws[0], ws[1], as_[0]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = w.clone();
    let od = out.data_mut();
    for i in 0..d_out {
        for j in 0..d_in {
            let mut acc = 0.0f64;
            for k in 0..r {
                acc += bd[i * r + k] as f64 * ad[k * d_in + j] as f64;
            }
            od[i * d_in + j] = (od[i * d_in + j] as f64 + scale * acc) as f32;
        }
    }
    Ok(out)
}

/// A copy of `bundle` with `weight` times the artifact folded into the
/// projection weights.
pub fn merge_lora_into(bundle: &ModelBundle, art: &LoraArtifact, weight: f64) -> Result<ModelBundle> {
    art.check_sites(bundle)?;
    let mut out = bundle.clone();
    for site in bundle.sites() {
        for proj in Projection::ALL {
            let name = projection_weight(&site.id, proj);
            let merged = lora_merge(
                &bundle.params[&name],
                &art.params[&key(&site.id, proj, "A")],
                &art.params[&key(&site.id, proj, "B")],
                weight * art.scale(),
            )?;
            out.params.insert(name, merged);
        }
    }
    Ok(out)
}

/// Trains only the A/B matrices on captions rendered through `template`.
#[allow(clippy::too_many_arguments)]
pub fn lora_train(
    bundle: &ModelBundle,
    schedule: &NoiseSchedule,
    corpus: &Corpus,
    artifact: LoraArtifact,
    template: &PromptTemplate,
    cfg: &TrainConfig,
    rng: &RngStream,
    observe: impl FnMut(usize, &StepReport),
) -> Result<(LoraArtifact, Vec<f64>)> {
    bundle.require_trained()?;
    artifact.check_sites(bundle)?;
    if corpus.is_empty() {
        return Err(Error::invalid("LoRA corpus is empty"));
    }
    let captions: Vec<String> = corpus
        .pairs
        .iter()
        .map(|p| template.render(p, &artifact.name))
        .collect::<Result<_>>()?;
    let sel = TrainableSelector::lora(&artifact);
    let mut work = bundle.clone();
    let mut adapters = AdapterSet {
        lora: Some((artifact, 1.0)),
        hypernet: None,
    };
    let losses = run_loop(&mut work, &mut adapters, schedule, &sel, cfg, rng, observe, |bundle, s| {
        let idx = draw_batch(corpus.len(), cfg.batch_size, &mut s.select);
        let caps: Vec<String> = idx.iter().map(|&i| captions[i].clone()).collect();
        Ok(vec![(corpus.image_batch(&idx)?, caption_tokens(bundle, &caps)?, 1.0)])
    })?;
    let (artifact, _) = adapters.lora.expect("still attached");
    Ok((artifact, losses))
}
