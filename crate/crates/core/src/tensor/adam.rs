use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Element, GradientMap, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad Adam hyperparameters {self:?}")))
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators, created lazily the first time a parameter receives a gradient.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T: Element = f32> {
    pub step: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update over the parameters named in `grads`.
/// Parameters without a gradient are not touched.
pub fn adam_step<T: Element>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &GradientMap<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = b1 * md[i] + (one - b1) * gi;
            vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("p".to_string(), Tensor::from_f64(&[1], &[v]).unwrap())])
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut params = one_param(1.0);
        let grads = BTreeMap::from([("p".to_string(), Tensor::from_f64(&[1], &[1.0]).unwrap())]);
        let mut state = AdamState::new();
        adam_step(&mut params, &grads, &mut state, &AdamConfig::with_lr(0.1)).unwrap();
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((params["p"].item() - expected).abs() < 1e-12);
        assert!((params["p"].item() - 0.9).abs() < 1e-7);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut params = one_param(0.37);
        let before = params["p"].clone();
        let grads = BTreeMap::from([("p".to_string(), Tensor::zeros(&[1]))]);
        let mut state = AdamState::new();
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
        assert!(params["p"].bit_eq(&before));
    }

    #[test]
    fn absent_parameter_untouched_and_unknown_rejected() {
        let mut params = one_param(2.0);
        params.insert("q".into(), Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
        let q_before = params["q"].clone();
        let grads = BTreeMap::from([("p".to_string(), Tensor::from_f64(&[1], &[0.5]).unwrap())]);
        let mut state = AdamState::new();
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
        assert!(params["q"].bit_eq(&q_before));

        let bogus = BTreeMap::from([("nope".to_string(), Tensor::zeros(&[1]))]);
        assert!(matches!(
            adam_step(&mut params, &bogus, &mut state, &AdamConfig::default()),
            Err(Error::UnknownParameter(_))
        ));
        assert_eq!(state.step, 1);
    }
}
