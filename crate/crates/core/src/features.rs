//! Physics-informed geometric descriptors.
//!
//! Fifteen candidate descriptors are computed from object extents and camera
//! geometry; nine of them form the model's numeric input. Lengths are taken in
//! whatever single unit the dataset stores (the synthetic generator uses
//! centimetre-scale magnitudes), volume in that unit cubed.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_FEATURES: usize = 9;

/// Model input order, shared with attribution.
pub const SELECTED: [&str; NUM_FEATURES] = [
    "log_volume",
    "log_max_dim",
    "compactness",
    "log_vol_surf",
    "elongation",
    "aspect_xy",
    "aspect_yz",
    "surf_sphere",
    "log_dist",
];

/// Descriptors computed for the selection audit but not fed to the model.
pub const REJECTED: [&str; 6] = [
    "log_surf_area",
    "log_geo_mean",
    "sphericity",
    "flatness",
    "vol_compact",
    "log_app_vol",
];

pub const STD_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawGeometry {
    pub l_x: f64,
    pub l_y: f64,
    pub l_z: f64,
    /// Horizontal camera distance.
    pub d_x: f64,
    /// Lens height.
    pub d_y: f64,
}

impl RawGeometry {
    pub fn new(l_x: f64, l_y: f64, l_z: f64, d_x: f64, d_y: f64) -> Result<Self> {
        let g = Self { l_x, l_y, l_z, d_x, d_y };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("L_x", self.l_x),
            ("L_y", self.l_y),
            ("L_z", self.l_z),
            ("D_x", self.d_x),
            ("D_y", self.d_y),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    /// Extents sorted ascending: (min, mid, max).
    pub fn sorted_extents(&self) -> [f64; 3] {
        let mut e = [self.l_x, self.l_y, self.l_z];
        e.sort_by(f64::total_cmp);
        e
    }

    pub fn volume(&self) -> f64 {
        let [a, b, c] = self.sorted_extents();
        a * b * c
    }

    pub fn surface_area(&self) -> f64 {
        let [a, b, c] = self.sorted_extents();
        2.0 * (a * b + b * c + a * c)
    }
}

/// `pi^(1/3) (6V)^(2/3) / A_s`, evaluated on extents normalised by the
/// largest one so that common rescaling does not perturb the result.
fn sphericity(sorted: [f64; 3]) -> f64 {
    let [a, b, c] = sorted.map(|e| e / sorted[2]);
    let v = a * b * c;
    let area = 2.0 * (a * b + b * c + a * c);
    PI.cbrt() * (6.0 * v).cbrt().powi(2) / area
}

pub fn compute_all_features(g: &RawGeometry) -> Result<BTreeMap<String, f64>> {
    g.validate()?;
    let sorted = g.sorted_extents();
    let [l_min, l_mid, l_max] = sorted;
    let v = g.volume();
    let area = g.surface_area();
    let psi = sphericity(sorted);
    let compactness = l_min / l_max;
    let entries = [
        ("log_volume", v.ln_1p()),
        ("log_surf_area", area.ln_1p()),
        ("log_max_dim", l_max.ln_1p()),
        ("log_geo_mean", v.cbrt().ln_1p()),
        ("compactness", compactness),
        ("log_vol_surf", (v / area).ln_1p()),
        ("elongation", l_max / l_mid),
        ("aspect_xy", g.l_x / g.l_y),
        ("aspect_yz", g.l_y / g.l_z),
        ("sphericity", psi),
        ("flatness", l_min / l_mid),
        ("surf_sphere", area.ln_1p() * psi),
        ("vol_compact", v.ln_1p() * compactness),
        ("log_dist", (g.d_x * g.d_x + g.d_y * g.d_y).sqrt().ln_1p()),
        ("log_app_vol", (v / (g.d_x * g.d_x)).ln_1p()),
    ];
    Ok(entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

/// The nine model features plus a 0-based category index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: [f64; NUM_FEATURES],
    pub category: usize,
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        SELECTED.iter().position(|&n| n == name).map(|i| self.values[i])
    }
}

pub fn select_features(all: &BTreeMap<String, f64>, category: usize) -> Result<FeatureVector> {
    let mut values = [0.0; NUM_FEATURES];
    for (slot, name) in values.iter_mut().zip(SELECTED) {
        *slot = *all
            .get(name)
            .ok_or_else(|| Error::Contract(format!("feature map lacks `{name}`")))?;
    }
    Ok(FeatureVector { values, category })
}

pub fn features_for(g: &RawGeometry, category: usize) -> Result<FeatureVector> {
    select_features(&compute_all_features(g)?, category)
}

/// Per-feature z-scoring fitted on the training split only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; NUM_FEATURES],
    pub std: [f64; NUM_FEATURES],
}

impl Standardizer {
    /// Population statistics (divide by N).
    pub fn fit(train: &[FeatureVector]) -> Result<Self> {
        if train.len() < 2 {
            return Err(Error::Contract(format!(
                "standardizer needs at least 2 samples, got {}",
                train.len()
            )));
        }
        let n = train.len() as f64;
        let mut mean = [0.0; NUM_FEATURES];
        let mut std = [0.0; NUM_FEATURES];
        for j in 0..NUM_FEATURES {
            mean[j] = train.iter().map(|f| f.values[j]).sum::<f64>() / n;
            let var = train.iter().map(|f| (f.values[j] - mean[j]).powi(2)).sum::<f64>() / n;
            std[j] = var.sqrt();
            if std[j] < STD_FLOOR {
                return Err(Error::DegenerateFeature {
                    name: SELECTED[j].to_string(),
                    std: std[j],
                });
            }
        }
        Ok(Self { mean, std })
    }

    pub fn transform(&self, f: &FeatureVector) -> FeatureVector {
        let mut out = *f;
        for j in 0..NUM_FEATURES {
            out.values[j] = (f.values[j] - self.mean[j]) / self.std[j];
        }
        out
    }

    pub fn inverse(&self, f: &FeatureVector) -> FeatureVector {
        let mut out = *f;
        for j in 0..NUM_FEATURES {
            out.values[j] = f.values[j] * self.std[j] + self.mean[j];
        }
        out
    }
}

/// `z = ln(1 + y)` for a non-negative weight.
pub fn target_log(y: f64) -> Result<f64> {
    if !(y >= 0.0) {
        return Err(Error::Domain(format!("weight must be >= 0, got {y}")));
    }
    Ok(y.ln_1p())
}

pub fn target_log_inverse(z: f64) -> f64 {
    z.exp_m1()
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub feature: String,
    pub pearson_r: f64,
    pub selected: bool,
}

/// Correlation of every descriptor with `ln(1 + weight)`. Informational
/// only: the selected set is fixed.
pub fn feature_audit(samples: &[(RawGeometry, f64)]) -> Result<Vec<AuditRow>> {
    let maps = samples
        .iter()
        .map(|(g, _)| compute_all_features(g))
        .collect::<Result<Vec<_>>>()?;
    let log_w = samples
        .iter()
        .map(|(_, w)| target_log(*w))
        .collect::<Result<Vec<_>>>()?;
    Ok(SELECTED
        .iter()
        .chain(REJECTED.iter())
        .map(|&name| {
            let col: Vec<f64> = maps.iter().map(|m| m[name]).collect();
            AuditRow {
                feature: name.to_string(),
                pearson_r: pearson(&col, &log_w),
                selected: SELECTED.contains(&name),
            }
        })
        .collect())
}

pub fn write_audit_csv<W: Write>(rows: &[AuditRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::IoOther(e.to_string());
    w.write_record(["feature_name", "pearson_r_vs_log_weight", "selected"]).map_err(io)?;
    for r in rows {
        w.write_record([r.feature.clone(), format!("{}", r.pearson_r), r.selected.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::IoOther(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube() -> RawGeometry {
        RawGeometry::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn unit_cube_ratios() {
        let m = compute_all_features(&cube()).unwrap();
        assert_eq!(m["compactness"], 1.0);
        assert_eq!(m["elongation"], 1.0);
        assert_eq!(m["aspect_xy"], 1.0);
        assert_eq!(m.len(), 15);
    }

    #[test]
    fn unit_cube_sphericity() {
        let m = compute_all_features(&cube()).unwrap();
        let expect = PI.powf(1.0 / 3.0) * 6f64.powf(2.0 / 3.0) / 6.0;
        assert!((m["sphericity"] - expect).abs() < 1e-14);
        assert!((m["sphericity"] - 0.80600).abs() < 1e-5);
    }

    #[test]
    fn log_volume_of_brick() {
        let g = RawGeometry::new(2.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let m = compute_all_features(&g).unwrap();
        assert!((m["log_volume"] - 3f64.ln()).abs() < 1e-15);
        assert!((m["log_volume"] - 1.0986).abs() < 1e-4);
    }

    #[test]
    fn non_positive_dimension_is_domain_error() {
        let g = RawGeometry { l_x: 0.0, l_y: 1.0, l_z: 1.0, d_x: 1.0, d_y: 1.0 };
        assert!(matches!(compute_all_features(&g), Err(Error::Domain(_))));
        assert!(RawGeometry::new(1.0, 1.0, -2.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn selection_drops_rejected() {
        let m = compute_all_features(&cube()).unwrap();
        assert!(m.contains_key("log_surf_area"));
        let f = select_features(&m, 0).unwrap();
        assert_eq!(f.get("log_surf_area"), None);
        assert!((f.get("log_dist").unwrap() - (1.0 + 2f64.sqrt()).ln()).abs() < 1e-15);
        assert!((f.get("log_dist").unwrap() - 0.8814).abs() < 1e-4);

        let mut altered = m.clone();
        for name in REJECTED {
            *altered.get_mut(name).unwrap() += 17.0;
        }
        assert_eq!(select_features(&altered, 0).unwrap(), f);
    }

    #[test]
    fn selection_requires_every_key() {
        let mut m = compute_all_features(&cube()).unwrap();
        m.remove("aspect_yz");
        assert!(matches!(select_features(&m, 0), Err(Error::Contract(_))));
    }

    fn fv(v: f64, w: f64) -> FeatureVector {
        let mut values = [0.0; NUM_FEATURES];
        for (j, slot) in values.iter_mut().enumerate() {
            *slot = if j == 0 { v } else { w * (j as f64 + 1.0) };
        }
        FeatureVector { values, category: 3 }
    }

    #[test]
    fn standardizer_population_stats() {
        let s = Standardizer::fit(&[fv(0.0, 1.0), fv(2.0, 2.0)]).unwrap();
        assert_eq!(s.mean[0], 1.0);
        assert_eq!(s.std[0], 1.0);
        let at_mean = fv(s.mean[0], 1.5);
        assert_eq!(s.transform(&at_mean).values[0], 0.0);
        let one_up = fv(s.mean[0] + s.std[0], 1.5);
        assert_eq!(s.transform(&one_up).values[0], 1.0);
        assert_eq!(s.transform(&one_up).category, 3);
    }

    #[test]
    fn standardizer_degenerate_column_is_named() {
        let err = Standardizer::fit(&[fv(1.0, 1.0), fv(1.0, 2.0)]).unwrap_err();
        match err {
            Error::DegenerateFeature { name, .. } => assert_eq!(name, "log_volume"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Standardizer::fit(&[fv(1.0, 1.0)]).is_err());
    }

    #[test]
    fn target_log_values() {
        assert_eq!(target_log(0.0).unwrap(), 0.0);
        assert_eq!(target_log(751.93).unwrap(), 752.93f64.ln());
        let z = target_log(3450.0).unwrap();
        assert!((target_log_inverse(z) - 3450.0).abs() / 3450.0 < 1e-9);
        assert!(matches!(target_log(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn audit_marks_selection() {
        let samples: Vec<(RawGeometry, f64)> = (1..20)
            .map(|i| {
                let s = i as f64;
                (RawGeometry::new(s, s * 0.5 + 1.0, 3.0, 10.0 + s, 5.0).unwrap(), s * s)
            })
            .collect();
        let rows = feature_audit(&samples).unwrap();
        assert_eq!(rows.len(), 15);
        assert_eq!(rows.iter().filter(|r| r.selected).count(), 9);
        let lv = rows.iter().find(|r| r.feature == "log_volume").unwrap();
        assert!(lv.pearson_r > 0.9);
        let mut buf = Vec::new();
        write_audit_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("feature_name,pearson_r_vs_log_weight,selected\n"));
    }
}
