//! The gradient-check suite: every differentiable building block, from single
//! ops up to whole model stages, compared against central differences over
//! many random seeds.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::gradcheck::{check, GradCheckReport, DEFAULT_STEP};
use crate::loss::{loss, LossKind};
use crate::model::{
    fusion, head, meta, visual, Bound, Ctx, FusionConfig, FusionMode, HeadConfig, Init, MetaConfig, ParamStore,
    ViTConfig,
};
use crate::rng::{rng_for, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteRow {
    pub name: &'static str,
    pub seeds: u64,
    pub compared: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Pairs the output with fixed random weights so every output coordinate
/// contributes a distinct gradient.
fn probe(tape: &mut Tape, out: Var, rng: &mut Rng) -> Result<Var> {
    let w = randn(rng, tape.shape(out));
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Runs `f` with the store's tensors as differentiable leaves bound by name.
fn check_store(
    store: &ParamStore,
    extra: &[Tensor],
    seed: u64,
    f: impl Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let names: Vec<String> = store.names().cloned().collect();
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    inputs.extend_from_slice(extra);
    let k = names.len();
    check(&inputs, DEFAULT_STEP, |tape, vars| {
        let b = Bound::from_vars(names.iter().cloned().zip(vars[..k].iter().copied()));
        let out = f(tape, &b, &vars[k..])?;
        probe(tape, out, &mut rng_for(seed, &[99]))
    })
}

/// Perturbs freshly initialised parameters so biases and LN affine terms are
/// not at their special initial values.
fn jitter(store: &mut ParamStore, rng: &mut Rng) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += 0.3 * n;
        }
    }
}

fn vit_cfg() -> ViTConfig {
    ViTConfig { image_side: 8, patch_side: 4, embed_dim: 8, layers: 1, heads: 2, mlp_ratio: 2, dropout: 0.0 }
}

fn meta_cfg() -> MetaConfig {
    MetaConfig { num_categories: 3, embed_dim: 4, hidden: [6, 5, 4], out_dim: 6 }
}

pub fn case(name: &'static str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, &[name.len() as u64, name.as_bytes()[0] as u64]);
    let simple = |shapes: &[&[usize]], rng: &mut Rng, f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>| {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| randn(rng, s)).collect();
        check(&inputs, DEFAULT_STEP, |tape, v| {
            let out = f(tape, v)?;
            probe(tape, out, &mut rng_for(seed, &[7]))
        })
    };
    match name {
        "matmul" => simple(&[&[3, 4], &[4, 2]], &mut rng, &|t, v| t.matmul(v[0], v[1])),
        "batched_matmul" => simple(&[&[2, 3, 4], &[4, 5]], &mut rng, &|t, v| t.matmul(v[0], v[1])),
        "layer_norm" => simple(&[&[3, 5], &[5], &[5]], &mut rng, &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        "gelu" => simple(&[&[4, 5]], &mut rng, &|t, v| Ok(t.gelu(v[0]))),
        "relu" => simple(&[&[4, 5]], &mut rng, &|t, v| Ok(t.relu(v[0]))),
        "softmax" => simple(&[&[4, 5]], &mut rng, &|t, v| Ok(t.softmax_lastdim(v[0]))),
        "attention" => simple(&[&[2, 3, 4], &[2, 5, 4], &[2, 5, 4]], &mut rng, &|t, v| t.attention(v[0], v[1], v[2], 2)),
        "vit_block" => {
            let cfg = vit_cfg();
            let mut store = ParamStore::new();
            visual::init_visual(&cfg, &mut store, &mut Init { rng: &mut rng });
            jitter(&mut store, &mut rng);
            let z = randn(&mut rng, &[2, cfg.num_patches() + 1, cfg.embed_dim]);
            let block: ParamStore = {
                let mut s = ParamStore::new();
                for (n, t) in store.iter().filter(|(n, _)| n.starts_with("visual.block0.")) {
                    s.insert(n.clone(), t.clone());
                }
                s
            };
            check_store(&block, &[z], seed, |t, b, x| visual::encoder_block(t, b, &cfg, 0, x[0], &mut Ctx::eval()))
        }
        "vit_encoder" => {
            let cfg = vit_cfg();
            let mut store = ParamStore::new();
            visual::init_visual(&cfg, &mut store, &mut Init { rng: &mut rng });
            jitter(&mut store, &mut rng);
            let patches = randn(&mut rng, &[2, cfg.num_patches(), cfg.patch_width()]);
            check_store(&store, &[patches], seed, |t, b, x| {
                visual::encode(t, b, &cfg, x[0], &mut Ctx::eval()).map(|(_, h_v)| h_v)
            })
        }
        "metadata_mlp" => {
            let cfg = meta_cfg();
            let mut store = ParamStore::new();
            meta::init_meta(&cfg, &mut store, &mut Init { rng: &mut rng });
            jitter(&mut store, &mut rng);
            let feats = randn(&mut rng, &[3, crate::features::NUM_FEATURES]);
            let cats: Vec<usize> = (0..3).map(|_| rng.random_range(0..cfg.num_categories)).collect();
            check_store(&store, &[feats], seed, |t, b, x| meta::encode_meta(t, b, &cfg, x[0], &cats).map(|m| m.h_m))
        }
        "fusion_stack" => {
            // cycle through the four modes across seeds
            let mode = FusionMode::ALL[(seed % 4) as usize];
            let cfg = FusionConfig { mode, heads: 2, stages: 2, fused_dim: 16, dropout: 0.0, token_level: false };
            let mut store = ParamStore::new();
            fusion::init_fusion(&cfg, 6, 5, &mut store, &mut Init { rng: &mut rng });
            jitter(&mut store, &mut rng);
            let h_v = randn(&mut rng, &[3, 6]);
            let h_m = randn(&mut rng, &[3, 5]);
            check_store(&store, &[h_v, h_m], seed, |t, b, x| fusion::fuse(t, b, &cfg, x[0], x[1], None, &mut Ctx::eval()))
        }
        "head" => {
            let cfg = HeadConfig { hidden: [6, 4], dropout: 0.1 };
            let mut store = ParamStore::new();
            head::init_head(&cfg, 5, &mut store, &mut Init { rng: &mut rng });
            jitter(&mut store, &mut rng);
            let z = randn(&mut rng, &[3, 5]);
            check_store(&store, &[z], seed, |t, b, x| head::predict_head(t, b, &cfg, x[0], &mut Ctx::eval()))
        }
        "loss_msle" | "loss_mse" | "loss_l1" => {
            let kind = match name {
                "loss_msle" => LossKind::Msle,
                "loss_mse" => LossKind::Mse,
                _ => LossKind::L1,
            };
            let pred = Tensor::from_fn(&[6, 1], |_| rng.random_range(0.5..50.0));
            let target = Tensor::from_fn(&[6, 1], |_| rng.random_range(0.5..50.0));
            check(&[pred, target], DEFAULT_STEP, |t, v| loss(kind, t, v[0], v[1]))
        }
        other => unreachable!("unknown case {other}"),
    }
}

pub const CASES: [&str; 15] = [
    "matmul",
    "batched_matmul",
    "layer_norm",
    "gelu",
    "relu",
    "softmax",
    "attention",
    "vit_block",
    "vit_encoder",
    "metadata_mlp",
    "fusion_stack",
    "head",
    "loss_msle",
    "loss_mse",
    "loss_l1",
];

/// One row per case, each aggregated over seeds `0..seeds`.
pub fn run_suite(seeds: u64) -> Result<Vec<SuiteRow>> {
    CASES
        .iter()
        .map(|&name| {
            let mut total = GradCheckReport::default();
            for seed in 0..seeds {
                total.merge(&case(name, seed)?);
            }
            Ok(SuiteRow {
                name,
                seeds,
                compared: total.compared,
                max_rel_error: total.max_rel_error,
                pass: total.passes(TOLERANCE) && total.compared > 0,
            })
        })
        .collect()
}
