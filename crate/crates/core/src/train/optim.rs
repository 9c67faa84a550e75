//! Adam with decoupled weight decay, and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates per parameter. Step counts are per parameter so a group
/// that sat frozen starts its bias correction from scratch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub cfg: AdamConfig,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub steps: BTreeMap<String, u64>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, ..Default::default() }
    }

    /// Updates every parameter named in `grads` with its own learning rate
    /// from `lr_for`. A non-finite gradient aborts before anything changes.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        lr_for: impl Fn(&str) -> f64,
        weight_decay: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("gradient of `{name}` is {bad}")));
            }
        }
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        for (name, g) in grads {
            let lr = lr_for(name);
            let p = params.get_mut(name)?;
            if p.numel() != g.len() {
                return Err(Error::Contract(format!("gradient of `{name}` has {} values, parameter {}", g.len(), p.numel())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let c1 = 1.0 - beta1.powi(*t as i32);
            let c2 = 1.0 - beta2.powi(*t as i32);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *x -= lr * weight_decay * *x;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moments as tensors, for checkpointing.
    pub fn moments(&self, params: &ParamStore) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::new();
        for (name, store) in [("adam_m", &self.m), ("adam_v", &self.v)] {
            for (k, data) in store {
                let shape = params.get(k)?.shape().to_vec();
                out.push((format!("{name}/{k}"), Tensor::new(shape, data.clone())?));
            }
        }
        for (k, &t) in &self.steps {
            out.push((format!("adam_t/{k}"), Tensor::scalar(t as f64)));
        }
        Ok(out)
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
