//! Training-time geometric augmentation and random erasing.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::image::{quantize, Image, BACKGROUND};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub crop_scale: (f64, f64),
    pub flip_p: f64,
    pub max_rotation_deg: f64,
    pub erase_p: f64,
    pub erase_area: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            crop_scale: (0.8, 1.0),
            flip_p: 0.5,
            max_rotation_deg: 15.0,
            erase_p: 0.5,
            erase_area: (0.02, 0.2),
        }
    }
}

/// crop → flip → rotate → erase. Output keeps the input's side length.
pub fn augment(img: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> Image {
    if !cfg.enabled {
        return img.clone();
    }
    let mut out = random_resized_crop(img, cfg.crop_scale, rng);
    if rng.random::<f64>() < cfg.flip_p {
        out = hflip(&out);
    }
    if cfg.max_rotation_deg > 0.0 {
        let deg = rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
        out = rotate_nearest(&out, deg.to_radians());
    }
    if rng.random::<f64>() < cfg.erase_p {
        random_erase(&mut out, cfg.erase_area, rng);
    }
    out
}

fn random_resized_crop(img: &Image, scale: (f64, f64), rng: &mut Rng) -> Image {
    let side = img.side();
    let s = rng.random_range(scale.0..=scale.1);
    let crop = ((side as f64) * s.sqrt()).round().clamp(1.0, side as f64);
    let max_off = side as f64 - crop;
    let (oy, ox) = (rng.random_range(0.0..=max_off), rng.random_range(0.0..=max_off));
    let mut out = Image::filled(side, BACKGROUND);
    let step = crop / side as f64;
    for y in 0..side {
        for x in 0..side {
            let sy = oy + (y as f64 + 0.5) * step - 0.5;
            let sx = ox + (x as f64 + 0.5) * step - 0.5;
            for c in 0..3 {
                out.set(y, x, c, bilinear(img, sy, sx, c));
            }
        }
    }
    out
}

fn bilinear(img: &Image, y: f64, x: f64, c: usize) -> f64 {
    let max = (img.side() - 1) as f64;
    let (y, x) = (y.clamp(0.0, max), x.clamp(0.0, max));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.side() - 1), (x0 + 1).min(img.side() - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img.get(y0, x0, c) * (1.0 - fx) + img.get(y0, x1, c) * fx;
    let bottom = img.get(y1, x0, c) * (1.0 - fx) + img.get(y1, x1, c) * fx;
    top * (1.0 - fy) + bottom * fy
}

pub fn hflip(img: &Image) -> Image {
    let side = img.side();
    let mut out = img.clone();
    for y in 0..side {
        for x in 0..side {
            out.set_pixel(y, x, img.pixel(y, side - 1 - x));
        }
    }
    out
}

/// Rotation about the centre with nearest-neighbour sampling; uncovered
/// pixels take the background value.
pub fn rotate_nearest(img: &Image, radians: f64) -> Image {
    let side = img.side();
    let c = (side as f64 - 1.0) / 2.0;
    let (sin, cos) = radians.sin_cos();
    let bg = quantize(BACKGROUND);
    let mut out = Image::filled(side, BACKGROUND);
    for y in 0..side {
        for x in 0..side {
            let (dy, dx) = (y as f64 - c, x as f64 - c);
            let sx = (cos * dx + sin * dy + c).round();
            let sy = (-sin * dx + cos * dy + c).round();
            let px = if sx >= 0.0 && sy >= 0.0 && sx < side as f64 && sy < side as f64 {
                img.pixel(sy as usize, sx as usize)
            } else {
                [bg; 3]
            };
            out.set_pixel(y, x, px);
        }
    }
    out
}

fn random_erase(img: &mut Image, area: (f64, f64), rng: &mut Rng) {
    let side = img.side() as f64;
    let target = rng.random_range(area.0..=area.1) * side * side;
    let log_ratio = rng.random_range((0.3f64).ln()..=(1.0f64 / 0.3).ln());
    let ratio = log_ratio.exp();
    let h = ((target * ratio).sqrt().round()).clamp(1.0, side) as usize;
    let w = ((target / ratio).sqrt().round()).clamp(1.0, side) as usize;
    let y0 = rng.random_range(0..=img.side() - h);
    let x0 = rng.random_range(0..=img.side() - w);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            for c in 0..3 {
                img.set(y, x, c, rng.random::<f64>());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn sample() -> Image {
        let mut img = Image::filled(16, BACKGROUND);
        for y in 4..12 {
            for x in 2..9 {
                img.set(y, x, 0, 0.9);
                img.set(y, x, 1, 0.2);
            }
        }
        img
    }

    #[test]
    fn disabled_is_identity() {
        let cfg = AugmentConfig { enabled: false, ..Default::default() };
        let img = sample();
        assert_eq!(augment(&img, &cfg, &mut rng_for(1, &[])), img);
    }

    #[test]
    fn shape_preserved_and_deterministic() {
        let cfg = AugmentConfig::default();
        let img = sample();
        for seed in 0..40 {
            let a = augment(&img, &cfg, &mut rng_for(seed, &[]));
            assert_eq!(a.side(), img.side());
            assert_eq!(a, augment(&img, &cfg, &mut rng_for(seed, &[])));
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let img = sample();
        assert_ne!(hflip(&img), img);
        assert_eq!(hflip(&hflip(&img)), img);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = sample();
        assert_eq!(rotate_nearest(&img, 0.0), img);
    }
}
