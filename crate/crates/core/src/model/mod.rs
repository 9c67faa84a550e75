//! The multimodal regressor: patch transformer, metadata encoder, mutual
//! attention fusion and a non-negative regression head.
//!
//! All forward functions work on batches. Images enter as a constant
//! `[B, N, P*P*3]` patch tensor, features as `[B, 9]` plus category indices.

pub mod fusion;
pub mod head;
pub mod meta;
pub mod params;
pub mod visual;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::features::{FeatureVector, NUM_FEATURES};
use crate::rng::{rng_for, stream, Rng};
use crate::tape::{Tape, Var, LN_EPS};
use crate::tensor::Tensor;

pub use fusion::{FusionConfig, FusionMode};
pub use head::HeadConfig;
pub use meta::MetaConfig;
pub use params::{Bound, Group, Init, ParamStore};
pub use visual::ViTConfig;

/// Per-channel statistics used to normalise pixels before patching.
pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Whether the network regresses kilograms or `ln(1 + kg)`.
///
/// Log is the default: MSLE on kilograms is exactly MSE on the log output, and
/// the head's final ReLU stays far from its dead zone for light objects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    Direct,
    #[default]
    Log,
}

impl std::str::FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(TargetMode::Direct),
            "log" => Ok(TargetMode::Log),
            other => Err(Error::Config(format!("unknown target mode `{other}` (direct|log)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub meta: MetaConfig,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
    pub target: TargetMode,
    /// Fixed multiplier on the head output; the trainer sets it to the mean
    /// training target so the head starts near the right magnitude.
    pub output_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vit: ViTConfig::default(),
            meta: MetaConfig::default(),
            fusion: FusionConfig::default(),
            head: HeadConfig::default(),
            target: TargetMode::Log,
            output_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.meta.validate()?;
        self.fusion.validate()?;
        self.head.validate()?;
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return Err(Error::Config(format!("output_scale must be positive, got {}", self.output_scale)));
        }
        Ok(())
    }
}

/// Training/eval switch plus the dropout stream.
pub struct Ctx {
    pub train: bool,
    rng: Option<Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self { train: false, rng: None }
    }

    pub fn train(rng: Rng) -> Self {
        Self { train: true, rng: Some(rng) }
    }

    pub fn train_at(seed: u64, epoch: u64, step: u64) -> Self {
        Self::train(rng_for(seed, &[stream::DROPOUT, epoch, step]))
    }
}

/// `x · prefix.w + prefix.b`.
pub fn linear(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, b.get(&format!("{prefix}.w"))?)?;
    tape.add(y, b.get(&format!("{prefix}.b"))?)
}

pub fn layer_norm(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gamma = b.get(&format!("{prefix}.gamma"))?;
    let beta = b.get(&format!("{prefix}.beta"))?;
    tape.layer_norm(x, gamma, beta, LN_EPS)
}

/// Inverted dropout; identity in eval mode or when `p == 0`.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, ctx: &mut Ctx) -> Result<Var> {
    if !ctx.train || p <= 0.0 {
        return Ok(x);
    }
    let rng = ctx
        .rng
        .as_mut()
        .ok_or_else(|| Error::Contract("training context without a dropout stream".into()))?;
    let keep = 1.0 / (1.0 - p);
    let shape = tape.shape(x).to_vec();
    let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
    let m = tape.constant(mask);
    tape.mul(x, m)
}

/// A model-ready batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, N, P*P*3]`, channel-normalised.
    pub patches: Tensor,
    /// `[B, 9]`, already standardised.
    pub features: Tensor,
    pub categories: Vec<usize>,
}

impl Batch {
    pub fn new(images: &[&Image], features: &[FeatureVector], vit: &ViTConfig) -> Result<Self> {
        if images.is_empty() || images.len() != features.len() {
            return Err(Error::dim(format!(
                "batch needs matching non-empty images ({}) and features ({})",
                images.len(),
                features.len()
            )));
        }
        let patches = images_to_patches(images, vit)?;
        let feats: Vec<f64> = features.iter().flat_map(|f| f.values).collect();
        Ok(Self {
            patches,
            features: Tensor::new(vec![features.len(), NUM_FEATURES], feats)?,
            categories: features.iter().map(|f| f.category).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }
}

/// Row-major patches; within a patch the layout is (row, column, channel).
pub fn images_to_patches(images: &[&Image], vit: &ViTConfig) -> Result<Tensor> {
    let (side, p) = (vit.image_side, vit.patch_side);
    let per_row = side / p;
    let n = per_row * per_row;
    let width = p * p * 3;
    let mut data = Vec::with_capacity(images.len() * n * width);
    for img in images {
        if img.side() != side {
            return Err(Error::dim(format!("image side {} does not match configured {side}", img.side())));
        }
        for py in 0..per_row {
            for px in 0..per_row {
                for y in 0..p {
                    for x in 0..p {
                        for c in 0..3 {
                            let v = img.get(py * p + y, px * p + x, c);
                            data.push((v - PIXEL_MEAN[c]) / PIXEL_STD[c]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![images.len(), n, width], data)
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[B, 1]` in target space (kg for direct, `ln(1 + kg)` for log).
    pub output: Var,
    pub h_v: Var,
    pub h_m: Var,
    pub fused: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, &[stream::INIT]);
        let mut init = Init { rng: &mut rng };
        let mut params = ParamStore::new();
        visual::init_visual(&cfg.vit, &mut params, &mut init);
        meta::init_meta(&cfg.meta, &mut params, &mut init);
        fusion::init_fusion(&cfg.fusion, cfg.vit.embed_dim, cfg.meta.out_dim, &mut params, &mut init);
        head::init_head(&cfg.head, cfg.fusion.fused_dim, &mut params, &mut init);
        Ok(Self { cfg, params })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, batch: &Batch, ctx: &mut Ctx) -> Result<Forward> {
        let patches = tape.constant(batch.patches.clone());
        let (tokens, h_v) = visual::encode(tape, b, &self.cfg.vit, patches, ctx)?;
        let features = tape.constant(batch.features.clone());
        self.forward_from_visual(tape, b, h_v, tokens, features, &batch.categories, ctx)
    }

    /// Everything after the visual encoder; lets callers reuse `h_v`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_from_visual(
        &self,
        tape: &mut Tape,
        b: &Bound,
        h_v: Var,
        tokens: Var,
        features: Var,
        categories: &[usize],
        ctx: &mut Ctx,
    ) -> Result<Forward> {
        let m = meta::encode_meta(tape, b, &self.cfg.meta, features, categories)?;
        let token_keys = self.cfg.fusion.token_level.then_some(tokens);
        let fused = fusion::fuse(tape, b, &self.cfg.fusion, h_v, m.h_m, token_keys, ctx)?;
        let raw = head::predict_head(tape, b, &self.cfg.head, fused, ctx)?;
        let output = tape.scale(raw, self.cfg.output_scale);
        Ok(Forward { output, h_v, h_m: m.h_m, fused })
    }

    /// Converts a target-space output to kilograms.
    pub fn to_kg(&self, output: f64) -> f64 {
        match self.cfg.target {
            TargetMode::Direct => output,
            TargetMode::Log => output.exp_m1(),
        }
    }

    /// Eval-mode predictions in kilograms.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = Bound::frozen(&mut tape, &self.params);
        let out = self.forward(&mut tape, &b, batch, &mut Ctx::eval())?;
        Ok(tape.data(out.output).iter().map(|&o| self.to_kg(o)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::image::BACKGROUND;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vit: ViTConfig { image_side: 8, patch_side: 4, embed_dim: 8, layers: 1, heads: 2, mlp_ratio: 2, dropout: 0.0 },
            meta: MetaConfig { num_categories: 3, embed_dim: 4, hidden: [6, 5, 4], out_dim: 8 },
            fusion: FusionConfig { fused_dim: 8, heads: 2, ..Default::default() },
            head: HeadConfig { hidden: [6, 4], dropout: 0.1 },
            ..Default::default()
        }
    }

    #[test]
    fn patch_layout() {
        let mut img = Image::filled(8, BACKGROUND);
        img.set(0, 4, 1, 1.0);
        let vit = ViTConfig { image_side: 8, patch_side: 4, ..Default::default() };
        let t = images_to_patches(&[&img], &vit).unwrap();
        assert_eq!(t.shape(), &[1, 4, 48]);
        // second patch (top right), first pixel, green channel
        let v = t.data()[48 + 1];
        assert!((v - (1.0 - PIXEL_MEAN[1]) / PIXEL_STD[1]).abs() < 1e-12);
    }

    #[test]
    fn predictions_are_nonnegative_and_deterministic() {
        let model = Model::new(tiny(), 3).unwrap();
        let img = Image::filled(8, 0.3);
        let f = FeatureVector { values: [0.5; 9], category: 2 };
        let batch = Batch::new(&[&img, &img], &[f, f], &model.cfg.vit).unwrap();
        let a = model.predict(&batch).unwrap();
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|&y| y >= 0.0));
        assert_eq!(a, model.predict(&batch).unwrap());
    }

    #[test]
    fn dropout_only_in_training() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[4, 50]));
        assert_eq!(dropout(&mut tape, x, 0.5, &mut Ctx::eval()).unwrap(), x);
        let y = dropout(&mut tape, x, 0.5, &mut Ctx::train_at(1, 0, 0)).unwrap();
        let d = tape.data(y);
        assert!(d.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(d.contains(&0.0) && d.contains(&2.0));
    }
}
