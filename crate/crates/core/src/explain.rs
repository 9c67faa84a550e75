//! Post-hoc explanations: the norm-based modality split, exact Shapley
//! values over the ten metadata inputs, and a templated text report with an
//! optional remote narration appended.
//!
//! The modality split compares encoder output norms. It is a heuristic, not a
//! causal attribution.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::features::{FeatureVector, NUM_FEATURES, SELECTED};
use crate::model::{images_to_patches, visual, Bound, Ctx, Model};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Small enough that `1 - s_visual - s_meta` stays below 1e-8 whenever the
/// two norms sum to at least 1e-2.
pub const MCR_EPS: f64 = 1e-10;

/// Players: the nine numeric features, then the category.
pub const NUM_PLAYERS: usize = NUM_FEATURES + 1;

pub fn player_names() -> Vec<&'static str> {
    SELECTED.iter().copied().chain(["category"]).collect()
}

/// `(s_visual, s_meta)` from the L2 norms of the two encoder outputs.
pub fn mcr(h_v: &[f64], h_m: &[f64], eps: f64) -> (f64, f64) {
    let nv = h_v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nm = h_m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d = nv + nm + eps;
    (nv / d, nm / d)
}

/// Shapley values from the value of every coalition, where bit `i` of the
/// index marks player `i` as present.
pub fn shapley_from_values(n: usize, values: &[f64]) -> Result<Vec<f64>> {
    if values.len() != 1 << n {
        return Err(Error::dim(format!("{n} players need {} coalition values, got {}", 1usize << n, values.len())));
    }
    // |S|! (n - |S| - 1)! / n!
    let fact = |k: usize| (1..=k).map(|x| x as f64).product::<f64>();
    let weights: Vec<f64> = (0..n).map(|s| fact(s) * fact(n - s - 1) / fact(n)).collect();
    let mut phi = vec![0.0; n];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1 << i;
        for s in (0..values.len()).filter(|s| s & bit == 0) {
            *p += weights[s.count_ones() as usize] * (values[s | bit] - values[s]);
        }
    }
    Ok(phi)
}

/// Exact Shapley values for any value function over `n` players.
pub fn shapley_exact(n: usize, value: impl Fn(&[bool]) -> f64) -> Result<Vec<f64>> {
    let values: Vec<f64> = (0..1usize << n)
        .map(|mask| value(&(0..n).map(|i| mask >> i & 1 == 1).collect::<Vec<_>>()))
        .collect();
    shapley_from_values(n, &values)
}

/// The input with every absent player replaced by its baseline value.
pub fn mix(x: &FeatureVector, baseline: &FeatureVector, mask: usize) -> FeatureVector {
    let mut out = *baseline;
    for j in 0..NUM_FEATURES {
        if mask >> j & 1 == 1 {
            out.values[j] = x.values[j];
        }
    }
    if mask >> NUM_FEATURES & 1 == 1 {
        out.category = x.category;
    }
    out
}

const COALITION_CHUNK: usize = 256;

/// Model predictions in kilograms for all 1024 coalitions, with the image
/// fixed. The visual encoder runs once; everything after it is batched.
pub fn coalition_predictions(model: &Model, image: &Image, x: &FeatureVector, baseline: &FeatureVector) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let b = Bound::frozen(&mut tape, &model.params);
    let patches = tape.constant(images_to_patches(&[image], &model.cfg.vit)?);
    let (tokens, h_v) = visual::encode(&mut tape, &b, &model.cfg.vit, patches, &mut Ctx::eval())?;
    let hv = tape.data(h_v).to_vec();
    let tok = tape.value(tokens).clone();

    let masks: Vec<usize> = (0..1usize << NUM_PLAYERS).collect();
    let mut out = Vec::with_capacity(masks.len());
    for chunk in masks.chunks(COALITION_CHUNK) {
        let n = chunk.len();
        let mixed: Vec<FeatureVector> = chunk.iter().map(|&m| mix(x, baseline, m)).collect();
        let mut tape = Tape::new();
        let b = Bound::frozen(&mut tape, &model.params);
        let h_v = tape.constant(Tensor::new(vec![n, hv.len()], hv.repeat(n))?);
        let mut tshape = tok.shape().to_vec();
        tshape[0] = n;
        let tokens = tape.constant(Tensor::new(tshape, tok.data().repeat(n))?);
        let feats = Tensor::new(vec![n, NUM_FEATURES], mixed.iter().flat_map(|f| f.values).collect())?;
        let feats = tape.constant(feats);
        let cats: Vec<usize> = mixed.iter().map(|f| f.category).collect();
        let fwd = model.forward_from_visual(&mut tape, &b, h_v, tokens, feats, &cats, &mut Ctx::eval())?;
        out.extend(tape.data(fwd.output).iter().map(|&o| model.to_kg(o)));
    }
    Ok(out)
}

/// Prediction and the two encoder outputs for one record.
pub fn encode_one(model: &Model, image: &Image, x: &FeatureVector) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let batch = crate::model::Batch::new(&[image], &[*x], &model.cfg.vit)?;
    let mut tape = Tape::new();
    let b = Bound::frozen(&mut tape, &model.params);
    let fwd = model.forward(&mut tape, &b, &batch, &mut Ctx::eval())?;
    let pred = model.to_kg(tape.data(fwd.output)[0]);
    Ok((pred, tape.data(fwd.h_v).to_vec(), tape.data(fwd.h_m).to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub feature: String,
    pub phi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub category: String,
    pub prediction_kg: f64,
    pub actual_kg: Option<f64>,
    pub abs_error_kg: Option<f64>,
    pub pct_error: Option<f64>,
    pub s_visual: f64,
    pub s_meta: f64,
    /// In player order.
    pub shapley: Vec<Attribution>,
    pub baseline_prediction_kg: f64,
    /// `sum(phi) - (prediction - baseline)`.
    pub efficiency_gap: f64,
    pub rendered_text: String,
    pub narration: Option<String>,
}

impl ExplanationReport {
    /// Indices of the three largest `|phi|`, earlier players winning ties.
    pub fn top3(&self) -> Vec<&Attribution> {
        let mut idx: Vec<usize> = (0..self.shapley.len()).collect();
        idx.sort_by(|&a, &b| self.shapley[b].phi.abs().total_cmp(&self.shapley[a].phi.abs()).then(a.cmp(&b)));
        idx.into_iter().take(3).map(|i| &self.shapley[i]).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Explains one standardised record. `baseline_category` is the modal
/// training category; the numeric baseline is the training mean (zero after
/// standardisation).
pub fn explain(
    model: &Model,
    image: &Image,
    x: &FeatureVector,
    baseline_category: usize,
    category_name: &str,
    actual_kg: Option<f64>,
) -> Result<ExplanationReport> {
    let baseline = FeatureVector { values: [0.0; NUM_FEATURES], category: baseline_category };
    let (prediction_kg, h_v, h_m) = encode_one(model, image, x)?;
    let values = coalition_predictions(model, image, x, &baseline)?;
    let phi = shapley_from_values(NUM_PLAYERS, &values)?;
    let full = values[values.len() - 1];
    let baseline_prediction_kg = values[0];
    let (s_visual, s_meta) = mcr(&h_v, &h_m, MCR_EPS);
    let abs_error_kg = actual_kg.map(|a| (prediction_kg - a).abs());
    let mut report = ExplanationReport {
        category: category_name.to_string(),
        prediction_kg,
        actual_kg,
        abs_error_kg,
        pct_error: actual_kg.zip(abs_error_kg).map(|(a, e)| 100.0 * e / a),
        s_visual,
        s_meta,
        shapley: player_names()
            .into_iter()
            .zip(&phi)
            .map(|(f, &p)| Attribution { feature: f.to_string(), phi: p })
            .collect(),
        baseline_prediction_kg,
        efficiency_gap: phi.iter().sum::<f64>() - (full - baseline_prediction_kg),
        rendered_text: String::new(),
        narration: None,
    };
    report.rendered_text = render_report(&report_fields(&report), DEFAULT_TEMPLATE)?;
    Ok(report)
}

pub const DEFAULT_TEMPLATE: &str = "\
Prediction Overview
Estimated weight for this {category} item: {prediction_kg} kg. {error_sentence}

Input Modality Influence
Image features carry {s_visual} of the encoded signal; physical metadata carries {s_meta}.
Largest metadata attributions against a reference prediction of {baseline_kg} kg:
{top_features}
";

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

pub fn report_fields(r: &ExplanationReport) -> BTreeMap<&'static str, String> {
    let error_sentence = match (r.actual_kg, r.abs_error_kg, r.pct_error) {
        (Some(a), Some(e), Some(p)) => {
            format!("Against the recorded {a:.1} kg this is an absolute error of {e:.1} kg ({p:.1}%).")
        }
        _ => "No recorded weight was supplied.".to_string(),
    };
    let top: Vec<String> = r
        .top3()
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let dir = if a.phi >= 0.0 { "raises" } else { "lowers" };
            format!("  {}. {}: {:+.1} kg ({dir} the estimate)", i + 1, a.feature, a.phi)
        })
        .collect();
    BTreeMap::from([
        ("category", r.category.clone()),
        ("prediction_kg", format!("{:.1}", r.prediction_kg)),
        ("error_sentence", error_sentence),
        ("s_visual", pct(r.s_visual)),
        ("s_meta", pct(r.s_meta)),
        ("baseline_kg", format!("{:.1}", r.baseline_prediction_kg)),
        ("top_features", top.join("\n")),
    ])
}

/// Replaces every `{name}` in `template`. A placeholder without a field is an
/// error naming it.
pub fn render_report(fields: &BTreeMap<&str, String>, template: &str) -> Result<String> {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or_else(|| Error::Template(after.chars().take(20).collect()))?;
        let key = &after[..close];
        out.push_str(fields.get(key).ok_or_else(|| Error::Template(key.to_string()))?);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Remote text-generation endpoint, configured from the environment.
#[derive(Clone, Debug, PartialEq)]
pub struct NarrationEndpoint {
    pub url: String,
    pub model: Option<String>,
    pub timeout: Duration,
}

pub const DEFAULT_TIMEOUT_MS: u64 = 10_000;

impl NarrationEndpoint {
    /// `XAI_ENDPOINT_URL`, `XAI_MODEL`, `XAI_TIMEOUT_MS`; `None` when no URL is set.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var("XAI_ENDPOINT_URL").ok().filter(|u| !u.trim().is_empty())?;
        let timeout_ms = std::env::var("XAI_TIMEOUT_MS").ok().and_then(|v| v.parse().ok()).unwrap_or(DEFAULT_TIMEOUT_MS);
        Some(Self { url, model: std::env::var("XAI_MODEL").ok(), timeout: Duration::from_millis(timeout_ms) })
    }
}

/// Structured prompt sent to the endpoint.
pub fn prompt_json(r: &ExplanationReport, model: Option<&str>) -> serde_json::Value {
    let top: Vec<_> = r.top3().iter().map(|a| serde_json::json!({"feature": a.feature, "phi": a.phi})).collect();
    serde_json::json!({
        "model": model,
        "category": r.category,
        "prediction_kg": r.prediction_kg,
        "actual_kg": r.actual_kg,
        "s_visual": r.s_visual,
        "s_meta": r.s_meta,
        "shapley_top3": top,
    })
}

/// Posts the prompt and returns the response body verbatim.
pub fn external_narrate(endpoint: &NarrationEndpoint, prompt: &serde_json::Value) -> std::result::Result<String, String> {
    let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(endpoint.timeout)).build().into();
    let mut resp = agent
        .post(&endpoint.url)
        .header("content-type", "application/json")
        .send(prompt.to_string())
        .map_err(|e| e.to_string())?;
    let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
    if text.trim().is_empty() {
        return Err("endpoint returned an empty body".into());
    }
    Ok(text)
}

/// Appends a narration when an endpoint is given and answers; otherwise the
/// templated report stands alone and a warning is logged.
pub fn attach_narration(report: &mut ExplanationReport, endpoint: Option<&NarrationEndpoint>) {
    let Some(ep) = endpoint else { return };
    match external_narrate(ep, &prompt_json(report, ep.model.as_deref())) {
        Ok(text) => {
            report.rendered_text.push_str("\nNarrative\n");
            report.rendered_text.push_str(&text);
            if !text.ends_with('\n') {
                report.rendered_text.push('\n');
            }
            report.narration = Some(text);
        }
        Err(e) => log::warn!("narration endpoint unavailable, keeping the templated report: {e}"),
    }
}
