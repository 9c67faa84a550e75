//! Stacked mutual attention fusion of `h_v` and `h_m`.
//!
//! Each block attends in both directions (visual queries metadata and vice
//! versa), concatenates the two context vectors with residual projections of
//! its inputs, and squeezes the result through a two-layer ReLU MLP with a
//! final layer norm. Later blocks take the previous block's output as both
//! inputs.
//!
//! One-way modes compute a single direction and use the residual projection
//! of the missing direction's query source in its place; concat skips
//! attention altogether. Parameters for every path exist in every mode so
//! checkpoints share a layout; unused ones simply receive no gradient.

use serde::{Deserialize, Serialize};

use super::{dropout, layer_norm, linear, Bound, Ctx, Init, ParamStore};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Mutual,
    V2m,
    M2v,
    Concat,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [FusionMode::Concat, FusionMode::V2m, FusionMode::M2v, FusionMode::Mutual];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Mutual => "mutual",
            FusionMode::V2m => "v2m",
            FusionMode::M2v => "m2v",
            FusionMode::Concat => "concat",
        }
    }

    fn uses_v2m(self) -> bool {
        matches!(self, FusionMode::Mutual | FusionMode::V2m)
    }

    fn uses_m2v(self) -> bool {
        matches!(self, FusionMode::Mutual | FusionMode::M2v)
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mutual" => Ok(FusionMode::Mutual),
            "v2m" | "one_way_v2m" => Ok(FusionMode::V2m),
            "m2v" | "one_way_m2v" => Ok(FusionMode::M2v),
            "concat" => Ok(FusionMode::Concat),
            other => Err(Error::Config(format!("unknown fusion mode `{other}` (mutual|v2m|m2v|concat)"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub heads: usize,
    pub stages: usize,
    /// Attention width and output width.
    pub fused_dim: usize,
    pub dropout: f64,
    /// Let the metadata query attend over all visual tokens in the first block.
    pub token_level: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { mode: FusionMode::Mutual, heads: 4, stages: 2, fused_dim: 256, dropout: 0.1, token_level: false }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("fusion needs at least one stage".into()));
        }
        if self.heads == 0 || self.fused_dim == 0 || self.fused_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {} not divisible by {} heads",
                self.fused_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("fusion dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

pub fn init_fusion(cfg: &FusionConfig, visual_dim: usize, meta_dim: usize, store: &mut ParamStore, init: &mut Init) {
    let a = cfg.fused_dim;
    for s in 0..cfg.stages {
        let (dv, dm) = if s == 0 { (visual_dim, meta_dim) } else { (a, a) };
        let p = format!("fusion.block{s}");
        for (dir, dq, dkv) in [("v2m", dv, dm), ("m2v", dm, dv)] {
            init.linear(store, &format!("{p}.{dir}.q"), dq, a);
            init.linear(store, &format!("{p}.{dir}.k"), dkv, a);
            init.linear(store, &format!("{p}.{dir}.v"), dkv, a);
            init.linear(store, &format!("{p}.{dir}.o"), a, a);
            init.layer_norm(store, &format!("{p}.{dir}.ln"), a);
        }
        init.linear(store, &format!("{p}.res_v"), dv, a);
        init.linear(store, &format!("{p}.res_m"), dm, a);
        init.linear(store, &format!("{p}.fuse1"), 4 * a, a);
        init.linear(store, &format!("{p}.fuse2"), a, a);
        init.layer_norm(store, &format!("{p}.ln"), a);
    }
}

fn as_sequence(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    match s.len() {
        2 => tape.reshape(x, &[s[0], 1, s[1]]),
        3 => Ok(x),
        _ => Err(Error::dim(format!("attention source must be [B, d] or [B, L, d], got {s:?}"))),
    }
}

/// `LN(O · MHA(Q q_src, K kv_src, V kv_src))` under parameter prefix `prefix`
/// (e.g. `fusion.block0.v2m`). `q_src` is `[B, dq]`; `kv_src` is `[B, dk]`
/// or a token sequence `[B, L, dk]`. Returns `[B, A]`.
pub fn cross_attend(tape: &mut Tape, b: &Bound, prefix: &str, q_src: Var, kv_src: Var, heads: usize) -> Result<Var> {
    let batch = tape.shape(q_src)[0];
    let qs = as_sequence(tape, q_src)?;
    let ks = as_sequence(tape, kv_src)?;
    let q = linear(tape, b, &format!("{prefix}.q"), qs)?;
    let k = linear(tape, b, &format!("{prefix}.k"), ks)?;
    let v = linear(tape, b, &format!("{prefix}.v"), ks)?;
    let a = *tape.shape(q).last().expect("3-d");
    let ctx = tape.attention(q, k, v, heads)?;
    let o = linear(tape, b, &format!("{prefix}.o"), ctx)?;
    let o = tape.reshape(o, &[batch, a])?;
    layer_norm(tape, b, &format!("{prefix}.ln"), o)
}

/// One fusion block over `x` (visual side) and `y` (metadata side).
#[allow(clippy::too_many_arguments)]
pub fn mutual_block(
    tape: &mut Tape,
    b: &Bound,
    cfg: &FusionConfig,
    stage: usize,
    x: Var,
    y: Var,
    x_tokens: Option<Var>,
    ctx: &mut Ctx,
) -> Result<Var> {
    let p = format!("fusion.block{stage}");
    let res_v = linear(tape, b, &format!("{p}.res_v"), x)?;
    let res_m = linear(tape, b, &format!("{p}.res_m"), y)?;
    let z_vm = if cfg.mode.uses_v2m() {
        cross_attend(tape, b, &format!("{p}.v2m"), x, y, cfg.heads)?
    } else {
        res_v
    };
    let z_mv = if cfg.mode.uses_m2v() {
        cross_attend(tape, b, &format!("{p}.m2v"), y, x_tokens.unwrap_or(x), cfg.heads)?
    } else {
        res_m
    };
    let cat = tape.concat(&[z_vm, z_mv, res_v, res_m], 1)?;
    let h = linear(tape, b, &format!("{p}.fuse1"), cat)?;
    let h = tape.relu(h);
    let h = dropout(tape, h, cfg.dropout, ctx)?;
    let h = linear(tape, b, &format!("{p}.fuse2"), h)?;
    let h = tape.relu(h);
    layer_norm(tape, b, &format!("{p}.ln"), h)
}

/// `h_v: [B, D]`, `h_m: [B, M]` → `[B, fused_dim]`.
pub fn fuse(
    tape: &mut Tape,
    b: &Bound,
    cfg: &FusionConfig,
    h_v: Var,
    h_m: Var,
    visual_tokens: Option<Var>,
    ctx: &mut Ctx,
) -> Result<Var> {
    let mut z = mutual_block(tape, b, cfg, 0, h_v, h_m, visual_tokens, ctx)?;
    for stage in 1..cfg.stages {
        z = mutual_block(tape, b, cfg, stage, z, z, None, ctx)?;
    }
    Ok(z)
}

/// Euclidean norms of the two modality descriptors.
pub fn modality_norms(h_v: &[f64], h_m: &[f64]) -> (f64, f64) {
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    (norm(h_v), norm(h_m))
}
