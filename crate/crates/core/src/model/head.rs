//! Three-map ReLU regression head; the final ReLU keeps predictions >= 0.

use serde::{Deserialize, Serialize};

use super::{dropout, linear, Bound, Ctx, Init, ParamStore};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: [usize; 2],
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: [128, 64], dropout: 0.1 }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("head widths must be positive and dropout in [0, 1)".into()));
        }
        Ok(())
    }
}

/// The output bias starts at one so that, with the trainer's output scale,
/// the untrained head predicts roughly the mean target rather than a dead zero.
pub fn init_head(cfg: &HeadConfig, in_dim: usize, store: &mut ParamStore, init: &mut Init) {
    let [h1, h2] = cfg.hidden;
    init.linear(store, "head.l1", in_dim, h1);
    init.linear(store, "head.l2", h1, h2);
    init.linear(store, "head.l3", h2, 1);
    store.insert("head.l3.b", Tensor::vector(vec![1.0]));
}

/// `z: [B, in] → [B, 1]`.
pub fn predict_head(tape: &mut Tape, b: &Bound, cfg: &HeadConfig, z: Var, ctx: &mut Ctx) -> Result<Var> {
    let h = linear(tape, b, "head.l1", z)?;
    let h = tape.relu(h);
    let h = dropout(tape, h, cfg.dropout, ctx)?;
    let h = linear(tape, b, "head.l2", h)?;
    let h = tape.relu(h);
    let y = linear(tape, b, "head.l3", h)?;
    Ok(tape.relu(y))
}
