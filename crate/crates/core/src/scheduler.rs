//! Diffusion-time machinery: the beta schedule, forward noising, sinusoidal
//! timestep features and the guided reverse sampler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, RngStream, Tensor};

/// Multiplier applied to VAE latents before diffusion (and divided out before decoding).
pub const LATENT_SCALE: f64 = 0.18215;

/// Period of the slowest sinusoid in [`timestep_embedding`].
const MAX_PERIOD: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` over `timesteps` steps.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::invalid("schedule needs at least one timestep"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas = if timesteps == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (timesteps - 1) as f64;
            (0..timesteps).map(|i| beta_start + span * i as f64).collect()
        };
        Self::from_betas(betas)
    }

    /// Arbitrary betas in `[0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one timestep"));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::invalid(format!("beta {b} outside [0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn train_timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn latent_scale(&self) -> f64 {
        LATENT_SCALE
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.train_timesteps() {
            return Err(Error::IndexOutOfRange {
                what: "timestep",
                index: t,
                limit: self.train_timesteps(),
            });
        }
        Ok(())
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`, with one timestep per
    /// leading-axis element.
    pub fn add_noise<T: Element>(&self, x0: &Tensor<T>, eps: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
        if x0.shape() != eps.shape() {
            return Err(Error::shape("add_noise", x0.shape(), eps.shape()));
        }
        let batch = x0.shape().first().copied().unwrap_or(1);
        if t.len() != batch {
            return Err(Error::shape("add_noise", x0.shape(), &[t.len()]));
        }
        let per = x0.numel() / batch;
        let mut out = x0.clone();
        let od = out.data_mut();
        for (i, &ti) in t.iter().enumerate() {
            self.check_t(ti)?;
            let a = T::from_f64(self.alpha_bars[ti].sqrt());
            let s = T::from_f64((1.0 - self.alpha_bars[ti]).sqrt());
            let range = i * per..(i + 1) * per;
            for (o, &e) in od[range.clone()].iter_mut().zip(&eps.data()[range]) {
                *o = a * *o + s * e;
            }
        }
        Ok(out)
    }
}

/// Sinusoidal features of an integer timestep: `dim / 2` sines followed by
/// `dim / 2` cosines at frequencies `MAX_PERIOD^(-i / (dim/2))`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!("timestep embedding width must be even, got {dim}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Ok(out)
}

/// Batched embeddings, shape `[t.len(), dim]`.
pub fn timestep_embeddings<T: Element>(t: &[usize], dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        data.extend(timestep_embedding(ti, dim)?.into_iter().map(T::from_f64));
    }
    Tensor::new(vec![t.len(), dim], data)
}

/// Classifier-free guidance: `uncond + w (cond - uncond)`.
pub fn guided_prediction<T: Element>(uncond: &Tensor<T>, cond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    if w == 1.0 {
        if uncond.shape() != cond.shape() {
            return Err(Error::shape("guided_prediction", uncond.shape(), cond.shape()));
        }
        return Ok(cond.clone());
    }
    let w = T::from_f64(w);
    uncond.zip_map(cond, "guided_prediction", |u, c| u + w * (c - u))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    /// Stochastic reverse steps with fresh noise injected each step.
    Ancestral,
    /// Deterministic reverse steps that may skip timesteps.
    DeterministicSkip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub guidance: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::DeterministicSkip,
            steps: 50,
            guidance: 7.5,
        }
    }
}

impl SamplerConfig {
    /// Evenly spaced timesteps ending at `T - 1`, strictly decreasing.
    pub fn timesteps(&self, train_timesteps: usize) -> Result<Vec<usize>> {
        if self.steps == 0 || self.steps > train_timesteps {
            return Err(Error::invalid(format!(
                "inference steps {} must be in 1..={train_timesteps}",
                self.steps
            )));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::invalid(format!("guidance scale {} must be >= 0", self.guidance)));
        }
        Ok((0..self.steps)
            .rev()
            .map(|i| (i + 1) * train_timesteps / self.steps - 1)
            .collect())
    }
}

/// Anything that predicts the injected noise for a batch of latents.
pub trait NoisePredictor {
    /// `latents` is `[B, h, w, c]`, `context` is `[B, L, d]`, one timestep per element.
    fn predict(&self, latents: &Tensor, timesteps: &[usize], context: &Tensor) -> Result<Tensor>;
}

/// Reverse diffusion from standard-normal latents of shape `[B, ..latent_shape]`,
/// where `B` is the leading extent of `cond`. Each batch element draws from its
/// own child stream of `rng`, so results do not depend on batch composition.
pub fn sample(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    cond: &Tensor,
    uncond: &Tensor,
    latent_shape: &[usize],
    cfg: &SamplerConfig,
    rng: &RngStream,
) -> Result<Tensor> {
    if cond.shape() != uncond.shape() {
        return Err(Error::shape("sample", cond.shape(), uncond.shape()));
    }
    let timesteps = cfg.timesteps(schedule.train_timesteps())?;
    let batch = cond.shape()[0];
    let mut streams: Vec<RngStream> = (0..batch).map(|i| rng.split(i as u64)).collect();
    let per: usize = latent_shape.iter().product();
    let mut shape = vec![batch];
    shape.extend_from_slice(latent_shape);

    let mut data = Vec::with_capacity(batch * per);
    for s in streams.iter_mut() {
        data.extend((0..per).map(|_| s.normal() as f32));
    }
    let mut x = Tensor::new(shape.clone(), data)?;
    let both_ctx = Tensor::stack_rows(&[uncond.clone(), cond.clone()])?;
    let abar = schedule.alpha_bars();

    for (i, &t) in timesteps.iter().enumerate() {
        let doubled = Tensor::stack_rows(&[x.clone(), x.clone()])?;
        let pred = model.predict(&doubled, &vec![t; 2 * batch], &both_ctx)?;
        if pred.shape() != doubled.shape() {
            return Err(Error::shape("sample", doubled.shape(), pred.shape()));
        }
        let eps_u = pred.slice_rows(0, batch)?;
        let eps_c = pred.slice_rows(batch, 2 * batch)?;
        let eps = guided_prediction(&eps_u, &eps_c, cfg.guidance)?;

        let a_t = abar[t];
        let a_prev = timesteps.get(i + 1).map_or(1.0, |&tp| abar[tp]);
        let sigma = match cfg.kind {
            SamplerKind::DeterministicSkip => 0.0,
            SamplerKind::Ancestral => {
                ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).max(0.0).sqrt()
            }
        };
        let c_x0 = a_prev.sqrt() / a_t.sqrt();
        let c_eps = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt() - a_prev.sqrt() * (1.0 - a_t).sqrt() / a_t.sqrt();
        let (c_x0, c_eps, sigma_f) = (c_x0 as f32, c_eps as f32, sigma as f32);

        let xd = x.data_mut();
        for (b, stream) in streams.iter_mut().enumerate() {
            for j in b * per..(b + 1) * per {
                let mut v = c_x0 * xd[j] + c_eps * eps.data()[j];
                if sigma > 0.0 {
                    v += sigma_f * stream.normal() as f32;
                }
                xd[j] = v;
            }
        }
        if !x.all_finite() {
            return Err(Error::NonFinite { op: "sample" });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_betas_keep_alpha_bar_at_one() {
        let s = NoiseSchedule::from_betas(vec![0.0; 4]).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn cumulative_product_matches_hand_values() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        for (got, want) in s.alpha_bars().iter().zip([0.9, 0.72, 0.504, 0.3024]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn default_schedule_nearly_destroys_signal() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        // Independent product in log space.
        let log: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        assert!((s.alpha_bars()[999] - log.exp()).abs() < 1e-12);
        assert!(s.alpha_bars()[999] < 0.01);
        assert_eq!(s.latent_scale(), 0.18215);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn add_noise_scalar_example() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let one = Tensor::<f64>::ones(&[1, 1]);
        let x = s.add_noise(&one, &one, &[1]).unwrap();
        assert!((x.item() - (0.72f64.sqrt() + 0.28f64.sqrt())).abs() < 1e-12);
        assert!((x.item() - 1.3777).abs() < 1e-4);
        let zero = Tensor::<f64>::zeros(&[1, 1]);
        let x = s.add_noise(&one, &zero, &[2]).unwrap();
        assert_eq!(x.item(), 0.504f64.sqrt());
        assert!(s.add_noise(&one, &one, &[4]).is_err());
    }

    #[test]
    fn timestep_embedding_layout() {
        let e = timestep_embedding(0, 6).unwrap();
        assert_eq!(e, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let e = timestep_embedding(1, 4).unwrap();
        let expect = [1f64.sin(), 0.01f64.sin(), 1f64.cos(), 0.01f64.cos()];
        for (a, b) in e.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(timestep_embedding(3, 5).is_err());
    }

    #[test]
    fn guidance_endpoints_and_arithmetic() {
        let u = Tensor::<f32>::from_f64(&[3], &[0.1, -0.7, 2.0]).unwrap();
        let c = Tensor::<f32>::from_f64(&[3], &[0.3, 0.4, -1.0]).unwrap();
        assert!(guided_prediction(&u, &c, 1.0).unwrap().bit_eq(&c));
        assert!(guided_prediction(&u, &c, 0.0).unwrap().bit_eq(&u));
        let z = Tensor::<f32>::zeros(&[1]);
        let two = Tensor::<f32>::full(&[1], 2.0);
        assert_eq!(guided_prediction(&z, &two, 7.5).unwrap().item(), 15.0);
        assert!(guided_prediction(&u, &z, 2.0).is_err());
    }

    #[test]
    fn inference_timesteps_strictly_decrease() {
        let cfg = SamplerConfig::default();
        let ts = cfg.timesteps(1000).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 999);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        let one = SamplerConfig { steps: 1, ..cfg };
        assert_eq!(one.timesteps(1000).unwrap(), vec![999]);
        let all = SamplerConfig { steps: 1000, ..cfg };
        assert_eq!(all.timesteps(1000).unwrap(), (0..1000).rev().collect::<Vec<_>>());
        let too_many = SamplerConfig { steps: 1001, ..cfg };
        assert!(too_many.timesteps(1000).is_err());
    }
}
