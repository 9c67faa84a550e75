//! Cosine annealing with warm restarts, and the EMA shadow.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::ParamStore;

/// `lr_min + (lr_max - lr_min)(1 + cos(pi t / T)) / 2` for `t` in `[0, T]`,
/// written as a convex blend so both endpoints come out exact.
pub fn cosine(t: f64, period: f64, lr_max: f64, lr_min: f64) -> f64 {
    let w = 0.5 * (1.0 + (PI * t / period).cos());
    w * lr_max + (1.0 - w) * lr_min
}

/// Position inside the current restart cycle: `(t, T)` for a whole epoch
/// count. Periods grow by `mult` after every restart.
pub fn cycle_position(epoch: usize, period: usize, mult: f64) -> (f64, f64) {
    let mut t = epoch as f64;
    let mut p = period.max(1) as f64;
    while t >= p {
        t -= p;
        p = (p * mult).round().max(1.0);
    }
    (t, p)
}

/// Annealed learning rate for a 0-based epoch.
pub fn annealed(epoch: usize, period: usize, mult: f64, lr_max: f64, lr_min: f64) -> f64 {
    let (t, p) = cycle_position(epoch, period, mult);
    cosine(t, p, lr_max, lr_min)
}

/// `shadow = decay * shadow + (1 - decay) * params` for every parameter.
pub fn ema_update(shadow: &mut ParamStore, params: &ParamStore, decay: f64) -> Result<()> {
    if !shadow.same_layout(params) {
        return Err(Error::Contract("EMA shadow and parameters have drifted apart".into()));
    }
    for ((_, s), (_, p)) in shadow.iter_mut().zip(params.iter()) {
        for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}
