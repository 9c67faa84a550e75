//! Two-phase training: a warm-up with the visual backbone frozen, then joint
//! fine-tuning with a much smaller backbone learning rate.
//!
//! Every random draw is keyed by `(seed, epoch, step or record id)`, so a run
//! resumed from a checkpoint replays exactly the draws the uninterrupted run
//! would have made.

pub mod checkpoint;
pub mod optim;
pub mod schedule;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use optim::{clip_global_norm, AdamConfig, AdamW};
pub use schedule::{annealed, cosine, ema_update};

use crate::config::{flatten, unflatten};
use crate::dataset::{augment, AugmentConfig, WasteRecord};
use crate::error::{Error, Result};
use crate::features::{features_for, FeatureVector, Standardizer, NUM_FEATURES};
use crate::loss::{loss, loss_value, LossKind};
use crate::model::{Batch, Bound, Ctx, Group, Model, ModelConfig, ParamStore, TargetMode};
use crate::rng::{rng_for, stream};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs of phase 1 (backbone frozen).
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub restart_period: usize,
    pub restart_mult: f64,
    /// Global-norm clip; zero disables clipping.
    pub grad_clip: f64,
    pub loss: LossKind,
    /// Set the model's output scale to the mean training target before training.
    pub auto_output_scale: bool,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            warmup_epochs: 10,
            batch_size: 32,
            lr_head: 1e-4,
            lr_backbone: 2e-6,
            lr_min: 0.0,
            weight_decay: 1e-4,
            ema_decay: 0.999,
            restart_period: 30,
            restart_mult: 1.0,
            grad_clip: 1.0,
            loss: LossKind::Msle,
            auto_output_scale: true,
            augment: AugmentConfig::default(),
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.restart_period == 0 {
            return bad("epochs, batch_size and restart_period must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(self.lr_head > 0.0 && self.lr_backbone > 0.0 && self.lr_min >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates must be positive and weight decay non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) || self.restart_mult < 1.0 || self.grad_clip < 0.0 {
            return bad("ema_decay in [0, 1], restart_mult >= 1 and grad_clip >= 0 required".into());
        }
        Ok(())
    }

    pub fn phase(&self, epoch: usize) -> u8 {
        if epoch < self.warmup_epochs {
            1
        } else {
            2
        }
    }

    /// `(backbone, head)` learning rates for a 0-based epoch.
    pub fn learning_rates(&self, epoch: usize) -> (f64, f64) {
        let lr = |max: f64| annealed(epoch, self.restart_period, self.restart_mult, max, self.lr_min);
        let head = lr(self.lr_head);
        let backbone = if self.phase(epoch) == 1 { 0.0 } else { lr(self.lr_backbone) };
        (backbone, head)
    }
}

/// One row of the epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub phase: u8,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mae: f64,
    pub val_mape: f64,
}

pub const LOG_HEADER: &str = "epoch,phase,lr_backbone,lr_head,train_loss,val_loss,val_mae,val_mape";

pub fn write_log_csv(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut text = format!("{LOG_HEADER}\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch, r.phase, r.lr_backbone, r.lr_head, r.train_loss, r.val_loss, r.val_mae, r.val_mape
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A record with its standardised features.
#[derive(Clone, Copy, Debug)]
pub struct Prepared<'a> {
    pub record: &'a WasteRecord,
    pub features: FeatureVector,
}

pub fn raw_features(records: &[&WasteRecord]) -> Result<Vec<FeatureVector>> {
    records.iter().map(|r| features_for(&r.geometry, r.category)).collect()
}

pub fn prepare<'a>(records: &[&'a WasteRecord], s: &Standardizer) -> Result<Vec<Prepared<'a>>> {
    let raw = raw_features(records)?;
    Ok(records
        .iter()
        .zip(raw)
        .map(|(&record, f)| Prepared { record, features: s.transform(&f) })
        .collect())
}

/// Builds an eval-mode batch (no augmentation).
pub fn eval_batch(items: &[Prepared], model: &ModelConfig) -> Result<Batch> {
    let images: Vec<_> = items.iter().map(|p| &p.record.image).collect();
    let feats: Vec<_> = items.iter().map(|p| p.features).collect();
    Batch::new(&images, &feats, &model.vit)
}

const EVAL_CHUNK: usize = 256;

/// Eval-mode predictions in kilograms under `params`.
pub fn predict_kg(model: &Model, params: &ParamStore, items: &[Prepared]) -> Result<Vec<f64>> {
    let m = Model { cfg: model.cfg.clone(), params: params.clone() };
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(EVAL_CHUNK) {
        out.extend(m.predict(&eval_batch(chunk, &m.cfg)?)?);
    }
    Ok(out)
}

/// Targets in the model's output space.
pub fn to_target_space(mode: TargetMode, kg: f64) -> f64 {
    match mode {
        TargetMode::Direct => kg,
        TargetMode::Log => kg.ln_1p(),
    }
}

/// In log-target mode MSLE on kilograms is MSE on the log outputs.
fn effective_loss(kind: LossKind, mode: TargetMode) -> LossKind {
    match (kind, mode) {
        (LossKind::Msle, TargetMode::Log) => LossKind::Mse,
        (k, _) => k,
    }
}

/// Everything needed to continue or reuse a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub train_cfg: TrainConfig,
    pub opt: AdamW,
    pub ema: ParamStore,
    /// EMA weights at the best validation epoch; these are the inference weights.
    pub best: ParamStore,
    pub best_val_mae: f64,
    pub best_epoch: usize,
    pub standardizer: Standardizer,
    /// Completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
    pub vocabulary: Vec<String>,
    pub split_hash: String,
    /// Most frequent training category; the attribution baseline.
    pub modal_category: usize,
}

impl TrainState {
    pub fn inference_model(&self) -> Model {
        Model { cfg: self.model.cfg.clone(), params: self.best.clone() }
    }

    fn header(&self, kind: &str) -> Vec<(String, String)> {
        let mut h = vec![("state.kind".to_string(), format!("{kind:?}"))];
        h.extend(flatten(&self.model.cfg).into_iter().map(|(k, v)| (format!("model.{k}"), v)));
        h.extend(flatten(&self.train_cfg).into_iter().map(|(k, v)| (format!("train.{k}"), v)));
        h.push(("state.epoch".into(), self.epoch.to_string()));
        h.push(("state.seed".into(), self.train_cfg.seed.to_string()));
        h.push(("state.best_epoch".into(), self.best_epoch.to_string()));
        h.push(("state.best_val_mae".into(), format!("{:?}", self.best_val_mae.to_bits())));
        h.push(("state.split_hash".into(), format!("{:?}", self.split_hash)));
        h.push(("state.modal_category".into(), self.modal_category.to_string()));
        h.push((
            "state.vocabulary".into(),
            serde_json::to_string(&self.vocabulary).expect("strings serialise"),
        ));
        h
    }

    fn standardizer_sections(&self) -> Vec<(String, Tensor)> {
        vec![
            ("standardizer/mean".into(), Tensor::vector(self.standardizer.mean.to_vec())),
            ("standardizer/std".into(), Tensor::vector(self.standardizer.std.to_vec())),
        ]
    }

    /// Full resumable state.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut sections = Vec::new();
        for (prefix, store) in [("param", &self.model.params), ("ema", &self.ema), ("best", &self.best)] {
            sections.extend(store.iter().map(|(n, t)| (format!("{prefix}/{n}"), t.clone())));
        }
        sections.extend(self.opt.moments(&self.model.params)?);
        sections.extend(self.standardizer_sections());
        if !self.log.is_empty() {
            let data: Vec<f64> = self
                .log
                .iter()
                .flat_map(|r| {
                    [r.epoch as f64, r.phase as f64, r.lr_backbone, r.lr_head, r.train_loss, r.val_loss, r.val_mae, r.val_mape]
                })
                .collect();
            sections.push(("log".into(), Tensor::new(vec![self.log.len(), 8], data)?));
        }
        Ok(Checkpoint { header: self.header("full"), sections })
    }

    /// Weights and preprocessing only: enough for eval, predict and explain.
    pub fn to_inference_checkpoint(&self) -> Checkpoint {
        let mut sections: Vec<(String, Tensor)> =
            self.best.iter().map(|(n, t)| (format!("best/{n}"), t.clone())).collect();
        sections.extend(self.standardizer_sections());
        Checkpoint { header: self.header("inference"), sections }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let model_cfg: ModelConfig = unflatten(&c.header, "model")?;
        let train_cfg: TrainConfig = unflatten(&c.header, "train")?;
        let store = |prefix: &str| -> ParamStore {
            let mut s = ParamStore::new();
            for (n, t) in c.sections_with_prefix(prefix) {
                s.insert(n, t.clone());
            }
            s
        };
        let best = store("best");
        if best.is_empty() {
            return Err(Error::Contract("checkpoint holds no model weights".into()));
        }
        let reference = Model::new(model_cfg.clone(), 0)?;
        if !reference.params.same_layout(&best) {
            return Err(Error::Contract("checkpoint weights do not match the configured architecture".into()));
        }
        let full = c.require("state.kind")? == "\"full\"";
        let (params, ema) = if full { (store("param"), store("ema")) } else { (best.clone(), best.clone()) };

        let mut opt = AdamW::new(AdamConfig::default());
        for (n, t) in c.sections_with_prefix("adam_m") {
            opt.m.insert(n.to_string(), t.data().to_vec());
        }
        for (n, t) in c.sections_with_prefix("adam_v") {
            opt.v.insert(n.to_string(), t.data().to_vec());
        }
        for (n, t) in c.sections_with_prefix("adam_t") {
            opt.steps.insert(n.to_string(), t.item() as u64);
        }

        let vec9 = |name: &str| -> Result<[f64; NUM_FEATURES]> {
            let t = c
                .section(name)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks `{name}`")))?;
            t.data()
                .try_into()
                .map_err(|_| Error::Contract(format!("`{name}` must hold {NUM_FEATURES} values")))
        };
        let standardizer = Standardizer { mean: vec9("standardizer/mean")?, std: vec9("standardizer/std")? };

        let log = match c.section("log") {
            Some(t) => t
                .data()
                .chunks(8)
                .map(|r| EpochLog {
                    epoch: r[0] as usize,
                    phase: r[1] as u8,
                    lr_backbone: r[2],
                    lr_head: r[3],
                    train_loss: r[4],
                    val_loss: r[5],
                    val_mae: r[6],
                    val_mape: r[7],
                })
                .collect(),
            None => Vec::new(),
        };
        let parse_usize = |k: &str| -> Result<usize> {
            c.require(k)?.parse().map_err(|_| Error::Contract(format!("bad `{k}` in checkpoint")))
        };
        let bits: u64 = c
            .require("state.best_val_mae")?
            .parse()
            .map_err(|_| Error::Contract("bad `state.best_val_mae`".into()))?;
        let vocabulary: Vec<String> = serde_json::from_str(c.require("state.vocabulary")?)
            .map_err(|e| Error::Contract(format!("bad vocabulary in checkpoint: {e}")))?;
        let split_hash: String = serde_json::from_str(c.require("state.split_hash")?)
            .map_err(|e| Error::Contract(format!("bad split hash in checkpoint: {e}")))?;

        Ok(Self {
            model: Model { cfg: model_cfg, params },
            train_cfg,
            opt,
            ema,
            best,
            best_val_mae: f64::from_bits(bits),
            best_epoch: parse_usize("state.best_epoch")?,
            standardizer,
            epoch: parse_usize("state.epoch")?,
            log,
            vocabulary,
            split_hash,
            modal_category: parse_usize("state.modal_category")?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

/// Gradient snapshot passed to an observer after every optimisation step.
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub step: usize,
    pub phase: u8,
    pub loss: f64,
    /// Gradients of the trainable parameters, before clipping.
    pub grads: &'a BTreeMap<String, Vec<f64>>,
}

pub type StepObserver<'a> = dyn FnMut(&StepEvent) + 'a;

pub struct TrainRequest<'a> {
    pub train: Vec<&'a WasteRecord>,
    pub val: Vec<&'a WasteRecord>,
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub vocabulary: Vec<String>,
    pub split_hash: String,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub resume: Option<TrainState>,
    /// Stop once this many epochs are complete (for checkpoint/resume).
    pub stop_after: Option<usize>,
    /// Writes `best.ckpt`, `final.ckpt` and `epoch_log.csv` here.
    pub out_dir: Option<PathBuf>,
    pub observer: Option<&'a mut StepObserver<'a>>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    /// Hash of the backbone parameters after each epoch run in this call.
    pub backbone_hashes: Vec<String>,
}

fn initial_state(req: &TrainRequest) -> Result<TrainState> {
    let raw = raw_features(&req.train)?;
    let standardizer = Standardizer::fit(&raw)?;
    let mut cfg = req.model.clone();
    if req.config.auto_output_scale {
        let sum: f64 = req.train.iter().map(|r| to_target_space(cfg.target, r.weight_kg)).sum();
        cfg.output_scale = sum / req.train.len() as f64;
    }
    let mut counts = BTreeMap::new();
    for r in &req.train {
        *counts.entry(r.category).or_insert(0usize) += 1;
    }
    let modal_category = counts.iter().max_by_key(|(c, n)| (**n, std::cmp::Reverse(**c))).map_or(0, |(c, _)| *c);
    let model = Model::new(cfg, req.config.seed)?;
    Ok(TrainState {
        ema: model.params.clone(),
        best: model.params.clone(),
        model,
        train_cfg: req.config.clone(),
        opt: AdamW::new(AdamConfig::default()),
        best_val_mae: f64::INFINITY,
        best_epoch: 0,
        standardizer,
        epoch: 0,
        log: Vec::new(),
        vocabulary: req.vocabulary.clone(),
        split_hash: req.split_hash.clone(),
        modal_category,
    })
}

pub fn train(req: TrainRequest, mut opts: TrainOptions) -> Result<TrainOutcome> {
    req.config.validate()?;
    if req.train.len() < 2 || req.val.is_empty() {
        return Err(Error::Config(format!(
            "training needs >= 2 train and >= 1 validation records, got {} and {}",
            req.train.len(),
            req.val.len()
        )));
    }
    let mut state = match opts.resume.take() {
        Some(s) => {
            if s.train_cfg != req.config {
                log::warn!("resuming with a training config that differs from the checkpoint's");
            }
            if s.split_hash != req.split_hash {
                return Err(Error::Config(format!(
                    "checkpoint was trained on split {}, not {}",
                    s.split_hash, req.split_hash
                )));
            }
            s
        }
        None => initial_state(&req)?,
    };
    let cfg = state.train_cfg.clone();
    let train_items = prepare(&req.train, &state.standardizer)?;
    let val_items = prepare(&req.val, &state.standardizer)?;
    let mode = state.model.cfg.target;
    let kind = effective_loss(cfg.loss, mode);
    let val_targets: Vec<f64> = val_items.iter().map(|p| p.record.weight_kg).collect();

    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let last = opts.stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    let mut hashes = Vec::new();

    for epoch in state.epoch..last {
        let phase = cfg.phase(epoch);
        let (lr_bb, lr_head) = cfg.learning_rates(epoch);
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[stream::SHUFFLE, epoch as u64]));

        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let r = train_items[i].record;
                    augment(&r.image, &cfg.augment, &mut rng_for(cfg.seed, &[stream::AUGMENT, epoch as u64, r.id]))
                })
                .collect();
            let image_refs: Vec<_> = images.iter().collect();
            let feats: Vec<_> = chunk.iter().map(|&i| train_items[i].features).collect();
            let batch = Batch::new(&image_refs, &feats, &state.model.cfg.vit)?;
            let targets: Vec<f64> =
                chunk.iter().map(|&i| to_target_space(mode, train_items[i].record.weight_kg)).collect();

            let mut tape = Tape::new();
            let trainable = |n: &str| phase == 2 || Group::of(n).map_or(true, |g| !g.is_backbone());
            let bound = Bound::new(&mut tape, &state.model.params, trainable);
            let mut ctx = Ctx::train_at(cfg.seed, epoch as u64, step as u64);
            let fwd = state.model.forward(&mut tape, &bound, &batch, &mut ctx)?;
            let t = tape.constant(Tensor::new(vec![chunk.len(), 1], targets)?);
            let l = loss(kind, &mut tape, fwd.output, t)?;
            let lv = tape.value(l).item();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("loss became {lv} at epoch {} step {step}", epoch + 1)));
            }
            tape.backward(l)?;
            let mut grads = bound.gradients(&tape);
            grads.retain(|n, _| trainable(n));
            if let Some(obs) = opts.observer.as_deref_mut() {
                obs(&StepEvent { epoch, step, phase, loss: lv, grads: &grads });
            }
            if cfg.grad_clip > 0.0 {
                clip_global_norm(&mut grads, cfg.grad_clip);
            }
            let lr_for = |n: &str| if n.starts_with("visual.") { lr_bb } else { lr_head };
            state.opt.step(&mut state.model.params, &grads, lr_for, cfg.weight_decay)?;
            ema_update(&mut state.ema, &state.model.params, cfg.ema_decay)?;
            loss_sum += lv * chunk.len() as f64;
        }

        let preds = predict_kg(&state.model, &state.ema, &val_items)?;
        let pred_t: Vec<f64> = preds.iter().map(|&p| to_target_space(mode, p)).collect();
        let true_t: Vec<f64> = val_targets.iter().map(|&y| to_target_space(mode, y)).collect();
        let val_loss = loss_value(kind, &pred_t, &true_t)?;
        let (val_mae, val_mape) = crate::eval::mae_mape(&preds, &val_targets);
        let row = EpochLog {
            epoch: epoch + 1,
            phase,
            lr_backbone: lr_bb,
            lr_head,
            train_loss: loss_sum / train_items.len() as f64,
            val_loss,
            val_mae,
            val_mape,
        };
        log::info!(
            "epoch {:>3} phase {} train_loss {:.5} val_loss {:.5} val_mae {:.3} val_mape {:.2}%",
            row.epoch, row.phase, row.train_loss, row.val_loss, row.val_mae, row.val_mape
        );
        state.log.push(row);
        state.epoch = epoch + 1;
        hashes.push(state.model.params.group_hash(Group::Visual));
        if val_mae < state.best_val_mae {
            state.best_val_mae = val_mae;
            state.best_epoch = epoch + 1;
            state.best = state.ema.clone();
            if let Some(dir) = &opts.out_dir {
                state.to_inference_checkpoint().write(&dir.join("best.ckpt"))?;
            }
        }
    }

    if let Some(dir) = &opts.out_dir {
        state.to_checkpoint()?.write(&dir.join("final.ckpt"))?;
        write_log_csv(&dir.join("epoch_log.csv"), &state.log)?;
        let mut f = std::fs::File::create(dir.join("best_epoch.txt")).map_err(|e| Error::io(dir, e))?;
        writeln!(f, "{} {}", state.best_epoch, state.best_val_mae).map_err(|e| Error::io(dir, e))?;
    }
    Ok(TrainOutcome { state, backbone_hashes: hashes })
}
