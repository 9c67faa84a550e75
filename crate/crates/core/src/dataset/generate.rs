//! Synthetic stand-in for a real image + metadata weight collection.
//!
//! Each record draws a volume inside its category's range, an object shape
//! and camera pose inside the reference geometry ranges, and a weight
//! `reference(V) * fill / 0.75 * noise`, where the reference curve ties the
//! category's volume range to its weight range on a log-log line. Weights are
//! clamped into the category band; constant-weight categories only jitter
//! their shape.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::category::{allocate_counts, default_categories, validate_categories, CategorySpec};
use super::image::{Image, BACKGROUND};
use crate::error::{Error, Result};
use crate::features::RawGeometry;
use crate::rng::{rng_for, stream};

/// Stored lengths are centimetre-scale; volumes in the category table are m³.
pub const LENGTH_TO_METRE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub image_side: usize,
    pub l_x: AxisStats,
    pub l_y: AxisStats,
    pub l_z: AxisStats,
    pub d_x: AxisStats,
    pub d_y: AxisStats,
    pub fill: Range,
    /// Sigma of the multiplicative log-normal weight noise.
    pub noise_sigma: f64,
    /// Sigma of the per-axis log shape jitter.
    pub shape_sigma: f64,
    /// Apparent size (cm) that fills the whole frame.
    pub apparent_full_frame: f64,
    pub apparent_eps: f64,
    #[serde(rename = "category")]
    pub categories: Vec<CategorySpec>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_side: 32,
            l_x: AxisStats { mean: 96.26, std: 54.26, min: 12.0, max: 180.0 },
            l_y: AxisStats { mean: 51.27, std: 26.25, min: 12.0, max: 891.0 },
            l_z: AxisStats { mean: 45.32, std: 17.10, min: 6.0, max: 85.0 },
            d_x: AxisStats { mean: 86.55, std: 35.56, min: 24.0, max: 187.0 },
            d_y: AxisStats { mean: 55.64, std: 13.43, min: 12.0, max: 126.0 },
            fill: Range { min: 0.5, max: 1.0 },
            noise_sigma: 0.05,
            shape_sigma: 0.3,
            apparent_full_frame: 60.0,
            apparent_eps: 1e-6,
            categories: default_categories(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        validate_categories(&self.categories)?;
        if self.image_side < 4 {
            return Err(Error::Config(format!("image side {} is too small", self.image_side)));
        }
        if !(self.fill.min > 0.0 && self.fill.min <= self.fill.max) {
            return Err(Error::Config("fill range must satisfy 0 < min <= max".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("generator config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn vocabulary(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    fn fill_mid(&self) -> f64 {
        0.5 * (self.fill.min + self.fill.max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WasteRecord {
    pub id: u64,
    /// 0-based index into the category vocabulary.
    pub category: usize,
    pub geometry: RawGeometry,
    pub weight_kg: f64,
    pub image: Image,
}

impl WasteRecord {
    pub fn volume_m3(&self) -> f64 {
        self.geometry.volume() * LENGTH_TO_METRE.powi(3)
    }
}

pub fn generate(cfg: &GeneratorConfig, n: usize, seed: u64) -> Result<Vec<WasteRecord>> {
    cfg.validate()?;
    let c = cfg.categories.len();
    if n < c {
        return Err(Error::Config(format!(
            "n = {n} cannot cover all {c} categories"
        )));
    }
    let counts = allocate_counts(&cfg.categories, n);
    if let Some(i) = counts.iter().position(|&k| k == 0) {
        return Err(Error::Config(format!(
            "n = {n} leaves category `{}` empty",
            cfg.categories[i].name
        )));
    }
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(i, &k)| std::iter::repeat_n(i, k))
        .collect();
    labels.shuffle(&mut rng_for(seed, &[stream::GENERATE, u64::MAX]));

    labels
        .par_iter()
        .enumerate()
        .map(|(id, &category)| generate_one(cfg, id as u64, category, seed))
        .collect()
}

fn clipped_normal(rng: &mut crate::rng::Rng, s: &AxisStats) -> f64 {
    let n = Normal::new(s.mean, s.std).expect("finite stats");
    n.sample(rng).clamp(s.min, s.max)
}

fn generate_one(cfg: &GeneratorConfig, id: u64, category: usize, seed: u64) -> Result<WasteRecord> {
    let spec = &cfg.categories[category];
    let mut rng = rng_for(seed, &[stream::GENERATE, id]);

    let volume_m3 = if spec.volume_min == spec.volume_max {
        spec.volume_min
    } else {
        let (lo, hi) = (spec.volume_min.ln(), spec.volume_max.ln());
        rng.random_range(lo..=hi).exp()
    };
    let target_cm3 = volume_m3 / LENGTH_TO_METRE.powi(3);

    let axes = [&cfg.l_x, &cfg.l_y, &cfg.l_z];
    let jitter = Normal::new(0.0, cfg.shape_sigma).expect("finite sigma");
    let mut dims = axes.map(|a| a.mean * jitter.sample(&mut rng).exp());
    let scale = (target_cm3 / dims.iter().product::<f64>()).cbrt();
    for (d, a) in dims.iter_mut().zip(axes) {
        *d = (*d * scale).clamp(a.min, a.max);
    }
    let geometry = RawGeometry::new(
        dims[0],
        dims[1],
        dims[2],
        clipped_normal(&mut rng, &cfg.d_x),
        clipped_normal(&mut rng, &cfg.d_y),
    )?;

    let weight_kg = if spec.is_constant_weight() {
        spec.weight_min
    } else {
        let actual_m3 = geometry.volume() * LENGTH_TO_METRE.powi(3);
        let fill = rng.random_range(cfg.fill.min..=cfg.fill.max);
        let noise = LogNormal::new(0.0, cfg.noise_sigma).expect("finite sigma").sample(&mut rng);
        (spec.reference_weight(actual_m3) * fill / cfg.fill_mid() * noise).clamp(spec.weight_min, spec.weight_max)
    };

    let mut record = WasteRecord {
        id,
        category,
        geometry,
        weight_kg,
        image: Image::filled(cfg.image_side, BACKGROUND),
    };
    record.image = render_image(&record, cfg);
    Ok(record)
}

/// Draws the object as a centred rectangle whose pixel area is proportional
/// to `V / (D_x² + eps)` and whose aspect follows `L_x / L_z`. The fill is the
/// category colour, shaded by how dense the object is relative to its
/// category's reference curve, plus per-pixel noise seeded by the record.
pub fn render_image(r: &WasteRecord, cfg: &GeneratorConfig) -> Image {
    let side = cfg.image_side;
    let spec = &cfg.categories[r.category];
    let g = &r.geometry;
    let mut img = Image::filled(side, BACKGROUND);

    let apparent = g.volume() / (g.d_x * g.d_x + cfg.apparent_eps);
    let frac = (apparent / cfg.apparent_full_frame).min(0.95);
    let area_px = frac * (side * side) as f64;
    let aspect = (g.l_x / g.l_z).clamp(1.0 / 3.0, 3.0);
    let w = (area_px * aspect).sqrt().min(side as f64);
    let h = (area_px / w.max(f64::MIN_POSITIVE)).min(side as f64);
    if !(w > 0.0 && h > 0.0) {
        return img;
    }

    let relative = (r.weight_kg / spec.reference_weight(r.volume_m3())).ln();
    let shade = (0.6 + 0.8 * relative).clamp(0.2, 1.0);
    let base = spec.base_color();
    let mut rng = rng_for(spec.texture_seed, &[stream::TEXTURE, r.id]);
    let centre = side as f64 / 2.0;
    for y in 0..side {
        for x in 0..side {
            let inside = ((x as f64 + 0.5) - centre).abs() < w / 2.0 && ((y as f64 + 0.5) - centre).abs() < h / 2.0;
            if !inside {
                continue;
            }
            for (c, &b) in base.iter().enumerate() {
                let noise: f64 = rng.random_range(-0.08..0.08);
                let v = b * shade + noise;
                img.set(y, x, c, v);
            }
            // keep foreground distinguishable from the background colour
            if img.pixel(y, x) == [super::image::quantize(BACKGROUND); 3] {
                img.set(y, x, 0, BACKGROUND + 1.0 / 255.0);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(cat: usize, dims: (f64, f64, f64), d_x: f64) -> WasteRecord {
        WasteRecord {
            id: 5,
            category: cat,
            geometry: RawGeometry::new(dims.0, dims.1, dims.2, d_x, 50.0).unwrap(),
            weight_kg: 100.0,
            image: Image::filled(32, BACKGROUND),
        }
    }

    #[test]
    fn doubling_distance_quarters_silhouette() {
        let cfg = GeneratorConfig { image_side: 64, ..Default::default() };
        let near = render_image(&record(0, (60.0, 40.0, 40.0), 80.0), &cfg);
        let far = render_image(&record(0, (60.0, 40.0, 40.0), 160.0), &cfg);
        let ratio = near.foreground_count() as f64 / far.foreground_count() as f64;
        assert!((ratio - 4.0).abs() < 0.4, "ratio {ratio}");
    }

    #[test]
    fn category_changes_texture_statistics() {
        let cfg = GeneratorConfig::default();
        let a = render_image(&record(0, (60.0, 40.0, 40.0), 80.0), &cfg);
        let b = render_image(&record(1, (60.0, 40.0, 40.0), 80.0), &cfg);
        let (ma, mb) = (a.channel_means(), b.channel_means());
        let diff: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 0.02, "{ma:?} vs {mb:?}");
    }

    #[test]
    fn vanishing_volume_is_blank() {
        let cfg = GeneratorConfig::default();
        let img = render_image(&record(0, (1e-4, 1e-4, 1e-4), 100.0), &cfg);
        assert_eq!(img.foreground_count(), 0);
    }

    #[test]
    fn too_few_records_is_config_error() {
        let cfg = GeneratorConfig::default();
        assert!(matches!(generate(&cfg, 5, 1), Err(Error::Config(_))));
    }

    #[test]
    fn weights_stay_in_band() {
        let cfg = GeneratorConfig::default();
        let recs = generate(&cfg, 600, 3).unwrap();
        for r in &recs {
            let c = &cfg.categories[r.category];
            assert!(r.weight_kg >= c.weight_min && r.weight_kg <= c.weight_max);
            assert!((3.5..=3450.0).contains(&r.weight_kg));
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let cfg = GeneratorConfig::default();
        assert_eq!(generate(&cfg, 40, 9).unwrap(), generate(&cfg, 40, 9).unwrap());
        assert_ne!(generate(&cfg, 40, 9).unwrap(), generate(&cfg, 40, 10).unwrap());
    }

    #[test]
    fn config_toml_roundtrip() {
        let cfg = GeneratorConfig::default();
        let back = GeneratorConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
