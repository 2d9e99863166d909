//! Adam and the per-epoch schedules.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Vec<S>>,
    pub second: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    /// One bias-corrected update. Parameters without a gradient entry are
    /// treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &BTreeMap<String, Tensor<S>>, lr: f64) -> Result<()> {
        for g in grads.values() {
            if !g.all_finite() {
                return Err(Error::NonFinite { op: "adam gradient" });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2, eps) = (S::of(beta1), S::of(beta2), S::of(epsilon));
        let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
        let (inv_c1, inv_c2, lr) = (S::of(1.0 / c1), S::of(1.0 / c2), S::of(lr));
        let names: Vec<String> = store.params().keys().cloned().collect();
        for name in names {
            let value = store.param(&name)?;
            let n = value.len();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![S::zero(); n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![S::zero(); n]);
            let grad = grads.get(&name).map(Tensor::data);
            if let Some(g) = grad {
                if g.len() != n {
                    return Err(Error::Contract(format!("gradient of {name} has {} entries, parameter {n}", g.len())));
                }
            }
            let mut data = value.to_vec();
            for i in 0..n {
                let gi = grad.map_or(S::zero(), |g| g[i]);
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let m_hat = m[i] * inv_c1;
                let v_hat = v[i] * inv_c2;
                data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            let shape = value.shape().to_vec();
            store.set_param(&name, Tensor::new(&shape, data)?)?;
        }
        Ok(())
    }
}

/// `lr0 * decay^epoch`.
pub fn learning_rate(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// Exponential interpolation from `start` at epoch 0 to `end` at the last epoch.
pub fn bn_momentum(start: f64, end: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return start;
    }
    start * (end / start).powf(epoch as f64 / (epochs - 1) as f64)
}
