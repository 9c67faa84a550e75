//! Run configuration: a flat `section.key = value` text file.
//!
//! The syntax is TOML restricted to dotted keys, so `train.epochs = 40` and
//! `model.fusion.mode = "concat"` are both valid lines. Unknown keys are
//! rejected. [`RunConfig::echo`] produces the canonical flattened form that is
//! written next to every output.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Records generated by `generate`.
    pub n: usize,
    pub seed: u64,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n: 2000, seed: 7, split: crate::dataset::split::DEFAULT_FRACTIONS }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let s = self.data.split;
        if s.iter().any(|&f| f < 0.0) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("data.split {s:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }

    /// Canonical flattened text, one `key = value` per line.
    pub fn echo(&self) -> String {
        flatten(self).into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Dotted `(key, value)` pairs for any serialisable struct; values are in
/// TOML syntax.
pub fn flatten<T: Serialize>(value: &T) -> Vec<(String, String)> {
    let v = toml::Value::try_from(value).expect("configuration serialises to TOML");
    let mut out = Vec::new();
    walk(&v, String::new(), &mut out);
    out
}

fn walk(v: &toml::Value, prefix: String, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                walk(child, key, out);
            }
        }
        leaf => out.push((prefix, leaf.to_string())),
    }
}

/// Inverse of [`flatten`] for pairs under `prefix.` (prefix stripped).
pub fn unflatten<T: DeserializeOwned>(pairs: &[(String, String)], prefix: &str) -> Result<T> {
    let dotted = format!("{prefix}.");
    let text: String = pairs
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&dotted).map(|rest| format!("{rest} = {v}\n")))
        .collect();
    toml::from_str(&text).map_err(|e| Error::Config(format!("{prefix}: {e}")))
}
