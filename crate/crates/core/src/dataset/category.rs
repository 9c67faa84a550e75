use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Generation parameters for one material category.
///
/// Volumes are in cubic metres; weights in kilograms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub share: f64,
    pub weight_min: f64,
    pub weight_max: f64,
    pub volume_min: f64,
    pub volume_max: f64,
    /// Implied mass per volume `(weight_min / volume_max, weight_max / volume_min)`.
    pub density_band: (f64, f64),
    pub texture_seed: u64,
}

impl CategorySpec {
    pub fn new(name: &str, share: f64, weight: (f64, f64), volume: (f64, f64), texture_seed: u64) -> Self {
        let lo = weight.0 / volume.1;
        let hi = weight.1 / volume.0;
        Self {
            name: name.to_string(),
            share,
            weight_min: weight.0,
            weight_max: weight.1,
            volume_min: volume.0,
            volume_max: volume.1,
            density_band: (lo.min(hi), lo.max(hi)),
            texture_seed,
        }
    }

    pub fn is_constant_weight(&self) -> bool {
        self.weight_min == self.weight_max
    }

    /// Reference weight for a volume: log-linear interpolation between
    /// `(volume_min, weight_min)` and `(volume_max, weight_max)`, saturating
    /// outside the volume range.
    pub fn reference_weight(&self, volume_m3: f64) -> f64 {
        if self.is_constant_weight() || self.volume_min == self.volume_max {
            return (self.weight_min * self.weight_max).sqrt();
        }
        let t = ((volume_m3.ln() - self.volume_min.ln()) / (self.volume_max.ln() - self.volume_min.ln()))
            .clamp(0.0, 1.0);
        (self.weight_min.ln() + t * (self.weight_max.ln() - self.weight_min.ln())).exp()
    }

    /// Base RGB colour of the category texture.
    pub fn base_color(&self) -> [f64; 3] {
        let hue = (self.texture_seed as f64 * 0.618_033_988_749_895).fract();
        hsv_to_rgb(hue, 0.65, 0.85)
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Per-category counts of the reference collection (10,421 records).
const REFERENCE_COUNTS: [(&str, u32, (f64, f64), (f64, f64)); 11] = [
    ("Automotive Scrap", 3514, (3.5, 1610.0), (0.0039, 1.7820)),
    ("Ferrous Metal", 3050, (9.0, 1850.0), (0.0010, 0.4189)),
    ("Cardboard", 1094, (9.3, 355.0), (0.0084, 0.2930)),
    ("Rigid Plastic", 799, (9.0, 210.0), (0.0284, 0.0884)),
    ("Wood", 701, (52.0, 3450.0), (0.0162, 0.4885)),
    ("General Trash", 336, (14.0, 28.0), (0.0240, 0.0790)),
    ("Industrial Gas Cylinder", 202, (1245.0, 1245.0), (0.0262, 0.0262)),
    ("Rubber", 200, (115.0, 115.0), (0.1010, 0.1010)),
    ("Appliance", 200, (85.0, 85.0), (0.0671, 0.0671)),
    ("Foam", 200, (46.0, 46.0), (0.1830, 0.1830)),
    ("Battery", 125, (152.0, 152.0), (0.0043, 0.0043)),
];

pub const REFERENCE_TOTAL: u32 = 10_421;

/// The eleven categories with shares taken from the reference counts, so
/// shares sum to exactly one.
pub fn default_categories() -> Vec<CategorySpec> {
    REFERENCE_COUNTS
        .iter()
        .enumerate()
        .map(|(i, &(name, count, w, v))| {
            CategorySpec::new(name, count as f64 / REFERENCE_TOTAL as f64, w, v, i as u64 + 1)
        })
        .collect()
}

pub fn validate_categories(specs: &[CategorySpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("no categories configured".into()));
    }
    let total: f64 = specs.iter().map(|c| c.share).sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("category shares sum to {total}, expected 1")));
    }
    for c in specs {
        let ok = c.share > 0.0
            && c.weight_min > 0.0
            && c.weight_min <= c.weight_max
            && c.volume_min > 0.0
            && c.volume_min <= c.volume_max;
        if !ok {
            return Err(Error::Config(format!("category `{}` has an invalid range", c.name)));
        }
    }
    Ok(())
}

/// Largest-remainder allocation of `n` records over the category shares.
pub fn allocate_counts(specs: &[CategorySpec], n: usize) -> Vec<usize> {
    let quotas: Vec<f64> = specs.iter().map(|c| c.share * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..specs.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    // every category gets a record when there are enough to go round
    if n >= specs.len() {
        while let Some(empty) = counts.iter().position(|&k| k == 0) {
            let donor = (0..counts.len()).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap_or(0);
            counts[donor] -= 1;
            counts[empty] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shares_sum_to_one() {
        let c = default_categories();
        assert_eq!(c.len(), 11);
        assert!((c.iter().map(|c| c.share).sum::<f64>() - 1.0).abs() < 1e-12);
        validate_categories(&c).unwrap();
        // displayed share of the largest class
        assert_eq!(format!("{:.1}", c[0].share * 100.0), "33.7");
    }

    #[test]
    fn reference_allocation_reproduces_counts() {
        let c = default_categories();
        let counts = allocate_counts(&c, REFERENCE_TOTAL as usize);
        let expect: Vec<usize> = REFERENCE_COUNTS.iter().map(|r| r.1 as usize).collect();
        assert_eq!(counts, expect);
    }

    #[test]
    fn allocation_is_exhaustive() {
        let c = default_categories();
        for n in [11, 50, 2000, 2001] {
            let counts = allocate_counts(&c, n);
            assert_eq!(counts.iter().sum::<usize>(), n);
            assert!(counts.iter().all(|&k| k > 0), "{n}: {counts:?}");
        }
    }

    #[test]
    fn density_band_is_ordered() {
        for c in default_categories() {
            assert!(c.density_band.0 <= c.density_band.1, "{}", c.name);
            let w = c.reference_weight((c.volume_min * c.volume_max).sqrt());
            assert!(w >= c.weight_min && w <= c.weight_max);
        }
    }
}
