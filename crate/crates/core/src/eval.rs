//! Regression metrics, weight-range bins and the ablation matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{Split, SplitIndex, WasteRecord};
use crate::error::{Error, Result};
use crate::loss::{loss_value, LossKind};
use crate::model::FusionMode;
use crate::train::{predict_kg, prepare, train, TrainOptions, TrainRequest, TrainState};

/// Targets below this are left out of MAPE and counted instead.
pub const MAPE_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub mae_kg: f64,
    pub rmse_kg: f64,
    pub mape_pct: f64,
    pub r2: f64,
    /// Samples dropped from MAPE because their target was (near) zero.
    pub mape_excluded: usize,
}

fn check_pair(pred: &[f64], y: &[f64]) -> Result<()> {
    if pred.len() != y.len() {
        return Err(Error::dim(format!("{} predictions for {} targets", pred.len(), y.len())));
    }
    Ok(())
}

fn mape_terms(pred: &[f64], y: &[f64]) -> (f64, usize) {
    let (mut sum, mut used) = (0.0, 0);
    for (&p, &t) in pred.iter().zip(y) {
        if t >= MAPE_FLOOR {
            sum += (p - t).abs() / t;
            used += 1;
        }
    }
    (if used == 0 { f64::NAN } else { 100.0 * sum / used as f64 }, pred.len() - used)
}

/// MAE and MAPE without preconditions, for per-epoch validation logging.
pub fn mae_mape(pred: &[f64], y: &[f64]) -> (f64, f64) {
    let mae = pred.iter().zip(y).map(|(p, t)| (p - t).abs()).sum::<f64>() / y.len().max(1) as f64;
    (mae, mape_terms(pred, y).0)
}

pub fn metrics(pred: &[f64], y: &[f64]) -> Result<Metrics> {
    check_pair(pred, y)?;
    let n = y.len();
    if n < 2 {
        return Err(Error::Contract(format!("metrics need at least 2 samples, got {n}")));
    }
    if let Some(bad) = y.iter().find(|&&t| !(t >= 0.0)) {
        return Err(Error::Domain(format!("MAPE undefined for target {bad}")));
    }
    let nf = n as f64;
    let mae = pred.iter().zip(y).map(|(p, t)| (p - t).abs()).sum::<f64>() / nf;
    let sse: f64 = pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum();
    let mean = y.iter().sum::<f64>() / nf;
    let sst: f64 = y.iter().map(|t| (t - mean).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::Domain("R² undefined: targets have zero variance".into()));
    }
    let (mape_pct, mape_excluded) = mape_terms(pred, y);
    Ok(Metrics { n, mae_kg: mae, rmse_kg: (sse / nf).sqrt(), mape_pct, r2: 1.0 - sse / sst, mape_excluded })
}

/// Half-open `[lo, hi)` range on the true weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
}

impl Bin {
    fn contains(&self, y: f64) -> bool {
        self.lo <= y && y < self.hi
    }
}

/// Light, Medium and Heavy; 500 to 1000 kg is deliberately not covered.
pub fn default_bins() -> Vec<Bin> {
    [("Light", 0.0, 100.0), ("Medium", 100.0, 500.0), ("Heavy", 1000.0, 3500.0)]
        .into_iter()
        .map(|(l, lo, hi)| Bin { label: l.into(), lo, hi })
        .collect()
}

pub const UNCOVERED: &str = "uncovered";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub label: String,
    /// `None` for the uncovered row.
    pub range: Option<(f64, f64)>,
    pub n: usize,
    pub mae_kg: Option<f64>,
    pub mape_pct: Option<f64>,
}

/// One row per bin plus a final row for samples no bin covers; the `n`
/// values always sum to the number of samples.
pub fn bin_metrics(pred: &[f64], y: &[f64], bins: &[Bin]) -> Result<Vec<BinRow>> {
    check_pair(pred, y)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins.len() + 1];
    for (i, &t) in y.iter().enumerate() {
        let slot = bins.iter().position(|b| b.contains(t)).unwrap_or(bins.len());
        members[slot].push(i);
    }
    let row = |label: String, range, idx: &[usize]| {
        let p: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
        let t: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let (mae, mape) = mae_mape(&p, &t);
        let some = |v: f64| (!idx.is_empty() && v.is_finite()).then_some(v);
        BinRow { label, range, n: idx.len(), mae_kg: some(mae), mape_pct: some(mape) }
    };
    let mut rows: Vec<BinRow> =
        bins.iter().zip(&members).map(|(b, idx)| row(b.label.clone(), Some((b.lo, b.hi)), idx)).collect();
    rows.push(row(UNCOVERED.into(), None, &members[bins.len()]));
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub split_hash: String,
    pub metrics: Metrics,
    pub msle: f64,
    pub bins: Vec<BinRow>,
}

impl MetricReport {
    pub fn new(split: Split, split_hash: &str, pred: &[f64], y: &[f64]) -> Result<Self> {
        Ok(Self {
            split: split.to_string(),
            split_hash: split_hash.to_string(),
            metrics: metrics(pred, y)?,
            msle: loss_value(LossKind::Msle, pred, y)?,
            bins: bin_metrics(pred, y, &default_bins())?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Overall row first, then one row per bin.
    pub fn to_csv(&self) -> String {
        let m = &self.metrics;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("scope,lo_kg,hi_kg,n,mae_kg,rmse_kg,mape_pct,r2\n");
        let _ = writeln!(s, "overall,,,{},{},{},{},{}", m.n, m.mae_kg, m.rmse_kg, m.mape_pct, m.r2);
        for b in &self.bins {
            let (lo, hi) = b.range.map(|(l, h)| (l.to_string(), h.to_string())).unwrap_or_default();
            let _ = writeln!(s, "{},{lo},{hi},{},{},,{},", b.label, b.n, opt(b.mae_kg), opt(b.mape_pct));
        }
        s
    }
}

/// Evaluates a trained state on one split.
pub fn evaluate(state: &TrainState, records: &[&WasteRecord], split: Split, split_hash: &str) -> Result<(MetricReport, Vec<f64>)> {
    let items = prepare(records, &state.standardizer)?;
    let pred = predict_kg(&state.model, &state.best, &items)?;
    let y: Vec<f64> = records.iter().map(|r| r.weight_kg).collect();
    Ok((MetricReport::new(split, split_hash, &pred, &y)?, pred))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub msle: f64,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub variant: String,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
    pub val: Option<SplitScores>,
    pub test: Option<SplitScores>,
}

/// The 12 variants: fusion (4), loss (3), depth (3), patch granularity (2).
/// Rows that coincide with the base configuration share one training run.
pub fn ablation_variants(base: &RunConfig) -> Vec<(&'static str, String, RunConfig)> {
    let mut out = Vec::new();
    for mode in [FusionMode::Concat, FusionMode::V2m, FusionMode::M2v, FusionMode::Mutual] {
        let mut c = base.clone();
        c.model.fusion.mode = mode;
        out.push(("fusion", mode.name().to_string(), c));
    }
    for kind in [LossKind::Mse, LossKind::L1, LossKind::Msle] {
        let mut c = base.clone();
        c.train.loss = kind;
        out.push(("loss", kind.name().to_string(), c));
    }
    for stages in 1..=3 {
        let mut c = base.clone();
        c.model.fusion.stages = stages;
        out.push(("depth", format!("{stages} stages"), c));
    }
    let p = base.model.vit.patch_side;
    for (label, side) in [("coarse", 2 * p), ("fine", p)] {
        let mut c = base.clone();
        c.model.vit.patch_side = side;
        out.push(("granularity", format!("{label} P={side}"), c));
    }
    out
}

fn scores(state: &TrainState, records: &[&WasteRecord], split: Split, hash: &str) -> Result<SplitScores> {
    let (r, _) = evaluate(state, records, split, hash)?;
    Ok(SplitScores { msle: r.msle, mae: r.metrics.mae_kg, rmse: r.metrics.rmse_kg, mape: r.metrics.mape_pct, r2: r.metrics.r2 })
}

/// Trains every variant on the same split and seed. A failing variant is
/// recorded and the rest continue.
pub fn run_ablation(
    records: &[WasteRecord],
    vocabulary: &[String],
    split: &SplitIndex,
    base: &RunConfig,
    parallel: bool,
) -> Result<Vec<AblationRow>> {
    let ds = crate::dataset::Dataset { records: records.to_vec(), vocabulary: vocabulary.to_vec() };
    let train_set = ds.subset(split, Split::Train)?;
    let val_set = ds.subset(split, Split::Val)?;
    let test_set = ds.subset(split, Split::Test)?;
    let hash = split.hash();
    let variants = ablation_variants(base);

    let mut unique: Vec<&RunConfig> = Vec::new();
    for (_, _, c) in &variants {
        if !unique.contains(&c) {
            unique.push(c);
        }
    }
    let run_one = |cfg: &&RunConfig| -> std::result::Result<(SplitScores, SplitScores), String> {
        let req = TrainRequest {
            train: train_set.clone(),
            val: val_set.clone(),
            model: cfg.model.clone(),
            config: cfg.train.clone(),
            vocabulary: vocabulary.to_vec(),
            split_hash: hash.clone(),
        };
        let run = || -> Result<_> {
            let out = train(req, TrainOptions::default())?;
            Ok((scores(&out.state, &val_set, Split::Val, &hash)?, scores(&out.state, &test_set, Split::Test, &hash)?))
        };
        run().map_err(|e| e.to_string())
    };
    let results: Vec<_> =
        if parallel { unique.par_iter().map(run_one).collect() } else { unique.iter().map(run_one).collect() };
    let by_cfg: BTreeMap<usize, _> = results.into_iter().enumerate().collect();

    Ok(variants
        .iter()
        .map(|(axis, variant, c)| {
            let i = unique.iter().position(|u| *u == c).expect("variant registered");
            match &by_cfg[&i] {
                Ok((v, t)) => AblationRow {
                    axis: axis.to_string(),
                    variant: variant.clone(),
                    status: "ok".into(),
                    val: Some(v.clone()),
                    test: Some(t.clone()),
                },
                Err(e) => {
                    log::warn!("ablation variant {axis}/{variant} failed: {e}");
                    AblationRow {
                        axis: axis.to_string(),
                        variant: variant.clone(),
                        status: format!("failed: {e}"),
                        val: None,
                        test: None,
                    }
                }
            }
        })
        .collect())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "axis,variant,status,val_msle,val_mae,val_rmse,val_mape,val_r2,test_msle,test_mae,test_rmse,test_mape,test_r2\n",
    );
    let cells = |x: &Option<SplitScores>| match x {
        Some(v) => format!("{},{},{},{},{}", v.msle, v.mae, v.rmse, v.mape, v.r2),
        None => ",,,,".into(),
    };
    for r in rows {
        let status = r.status.replace([',', '\n'], ";");
        let _ = writeln!(s, "{},{},{status},{},{}", r.axis, r.variant, cells(&r.val), cells(&r.test));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let m = metrics(&[110.0, 180.0], &[100.0, 200.0]).unwrap();
        assert_eq!(m.mae_kg, 15.0);
        assert!((m.rmse_kg - 250f64.sqrt()).abs() < 1e-12);
        assert!((m.mape_pct - 10.0).abs() < 1e-12);
        assert!((m.r2 - 0.9).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_mean_predictors() {
        let y = [3.0, 5.0, 10.0];
        let m = metrics(&y, &y).unwrap();
        assert_eq!((m.mae_kg, m.rmse_kg, m.mape_pct, m.r2), (0.0, 0.0, 0.0, 1.0));
        assert_eq!(metrics(&[6.0; 3], &y).unwrap().r2, 0.0);
    }

    #[test]
    fn error_cases() {
        assert!(matches!(metrics(&[1.0, 2.0], &[-1.0, 2.0]), Err(Error::Domain(_))));
        assert!(matches!(metrics(&[1.0, 2.0], &[4.0, 4.0]), Err(Error::Domain(_))));
        assert!(matches!(metrics(&[1.0], &[4.0]), Err(Error::Contract(_))));
        let m = metrics(&[1.0, 2.0, 3.0], &[0.0, 2.0, 4.0]).unwrap();
        assert_eq!(m.mape_excluded, 1);
    }

    #[test]
    fn uncovered_row_catches_the_gap() {
        let rows = bin_metrics(&[500.0, 50.0], &[550.0, 40.0], &default_bins()).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3].label, UNCOVERED);
        assert_eq!(rows[3].n, 1);
        assert_eq!(rows[0].n, 1);
        assert_eq!(rows[1].mae_kg, None);
    }

    #[test]
    fn twelve_variants() {
        let v = ablation_variants(&RunConfig::default());
        assert_eq!(v.len(), 12);
        let count = |a: &str| v.iter().filter(|(x, _, _)| *x == a).count();
        assert_eq!((count("fusion"), count("loss"), count("depth"), count("granularity")), (4, 3, 3, 2));
        assert!(v.iter().any(|(_, _, c)| c.model.fusion.stages == 3));
    }
}
