//! Metadata encoder: category embedding plus a GELU MLP over the physics
//! features, merged by a ReLU projection into `h_m`.

use serde::{Deserialize, Serialize};

use super::{linear, Bound, Init, ParamStore};
use crate::error::{Error, Result};
use crate::features::NUM_FEATURES;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub num_categories: usize,
    pub embed_dim: usize,
    pub hidden: [usize; 3],
    pub out_dim: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self { num_categories: 11, embed_dim: 32, hidden: [128, 64, 32], out_dim: 256 }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_categories == 0 || self.embed_dim == 0 || self.out_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("metadata encoder widths must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_meta(cfg: &MetaConfig, store: &mut ParamStore, init: &mut Init) {
    store.insert("meta.embed", init.normal(&[cfg.num_categories, cfg.embed_dim], 0.02));
    let [h1, h2, h3] = cfg.hidden;
    init.linear(store, "meta.mlp1", NUM_FEATURES, h1);
    init.linear(store, "meta.mlp2", h1, h2);
    init.linear(store, "meta.mlp3", h2, h3);
    init.linear(store, "meta.fuse", cfg.embed_dim + h3, cfg.out_dim);
}

#[derive(Clone, Copy, Debug)]
pub struct MetaOut {
    pub e_c: Var,
    pub e_n: Var,
    pub h_m: Var,
}

/// `features: [B, 9]` standardised; `categories` 0-based, one per row.
pub fn encode_meta(tape: &mut Tape, b: &Bound, cfg: &MetaConfig, features: Var, categories: &[usize]) -> Result<MetaOut> {
    let s = tape.shape(features).to_vec();
    if s.len() != 2 || s[1] != NUM_FEATURES || s[0] != categories.len() {
        return Err(Error::dim(format!(
            "features {s:?} do not match [{}, {NUM_FEATURES}]",
            categories.len()
        )));
    }
    if let Some(&bad) = categories.iter().find(|&&c| c >= cfg.num_categories) {
        return Err(Error::Index(format!("category index {bad} outside [0, {})", cfg.num_categories)));
    }
    let e_c = tape.gather_rows(b.get("meta.embed")?, categories)?;
    let mut h = features;
    for layer in ["meta.mlp1", "meta.mlp2", "meta.mlp3"] {
        h = linear(tape, b, layer, h)?;
        h = tape.gelu(h);
    }
    let e_n = h;
    let cat = tape.concat(&[e_c, e_n], 1)?;
    let z = linear(tape, b, "meta.fuse", cat)?;
    let h_m = tape.relu(z);
    Ok(MetaOut { e_c, e_n, h_m })
}
