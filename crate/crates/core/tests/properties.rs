use proptest::prelude::*;

use mwp_core::dataset::split::{largest_remainder, stratified_split, DEFAULT_FRACTIONS};
use mwp_core::dataset::{augment, AugmentConfig, Image};
use mwp_core::eval::{bin_metrics, default_bins, metrics};
use mwp_core::explain::{mcr, shapley_from_values, MCR_EPS};
use mwp_core::features::{compute_all_features, FeatureVector, RawGeometry, Standardizer, NUM_FEATURES};
use mwp_core::loss::{loss_value, LossKind};
use mwp_core::model::ParamStore;
use mwp_core::rng::rng_for;
use mwp_core::tensor::Tensor;
use mwp_core::train::{cosine, ema_update};

fn weights() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0f64..4000.0, 0.0f64..4000.0), 2..60)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rmse_dominates_mae_and_order_is_irrelevant(pairs in weights(), rot in 0usize..60) {
        let (p, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        prop_assume!(y.iter().any(|v| (v - y[0]).abs() > 1e-6));
        let m = metrics(&p, &y).unwrap();
        prop_assert!(m.rmse_kg >= m.mae_kg);
        let k = rot % p.len();
        let (mut p2, mut y2) = (p.clone(), y.clone());
        p2.rotate_left(k);
        y2.rotate_left(k);
        let m2 = metrics(&p2, &y2).unwrap();
        prop_assert!((m.mae_kg - m2.mae_kg).abs() <= 1e-9 * m.mae_kg.max(1.0));
        prop_assert!((m.r2 - m2.r2).abs() <= 1e-9);
    }

    #[test]
    fn bins_count_every_sample_once(pairs in weights()) {
        let (p, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let rows = bin_metrics(&p, &y, &default_bins()).unwrap();
        prop_assert_eq!(rows.iter().map(|r| r.n).sum::<usize>(), y.len());
        for r in &rows {
            prop_assert_eq!(r.n == 0, r.mae_kg.is_none());
        }
    }

    #[test]
    fn split_sizes_track_quotas(sizes in prop::collection::vec(3usize..200, 1..12), seed in any::<u64>()) {
        let mut items = Vec::new();
        let mut id = 0u64;
        for (c, &n) in sizes.iter().enumerate() {
            for _ in 0..n {
                items.push((id * 7 + 3, c));
                id += 1;
            }
        }
        let s = stratified_split(&items, DEFAULT_FRACTIONS, seed).unwrap();
        prop_assert_eq!(s.len(), items.len());
        for (c, &n) in sizes.iter().enumerate() {
            let in_cat = |ids: &[u64]| ids.iter().filter(|&&i| items.iter().any(|&(j, k)| j == i && k == c)).count();
            for (ids, f) in [(&s.train, 0.70), (&s.val, 0.15), (&s.test, 0.15)] {
                prop_assert!((in_cat(ids) as f64 - f * n as f64).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn largest_remainder_is_exhaustive(n in 0usize..10_000) {
        let c = largest_remainder(n, &DEFAULT_FRACTIONS);
        prop_assert_eq!(c.iter().sum::<usize>(), n);
    }

    #[test]
    fn msle_is_mse_of_log1p(pairs in weights()) {
        let (p, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let lp: Vec<f64> = p.iter().map(|v| v.ln_1p()).collect();
        let ly: Vec<f64> = y.iter().map(|v| v.ln_1p()).collect();
        let a = loss_value(LossKind::Msle, &p, &y).unwrap();
        let b = loss_value(LossKind::Mse, &lp, &ly).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ema_follows_geometric_closed_form(s0 in -10.0f64..10.0, p in -10.0f64..10.0, d in 0.5f64..0.999, k in 1i32..300) {
        let mut shadow = ParamStore::new();
        let mut params = ParamStore::new();
        shadow.insert("x", Tensor::scalar(s0));
        params.insert("x", Tensor::scalar(p));
        for _ in 0..k {
            ema_update(&mut shadow, &params, d).unwrap();
        }
        let want = p + d.powi(k) * (s0 - p);
        prop_assert!((shadow.get("x").unwrap().item() - want).abs() < 1e-12);
    }

    #[test]
    fn cosine_stays_between_its_endpoints(max in 1e-6f64..1e-2, frac in 0.0f64..1.0, t in 0.0f64..29.5) {
        let min = max * frac;
        let lr = cosine(t, 30.0, max, min);
        prop_assert!(lr <= max && lr >= min);
        prop_assert!(cosine(t + 0.5, 30.0, max, min) <= lr);
        prop_assert_eq!(cosine(0.0, 30.0, max, min), max);
        prop_assert_eq!(cosine(30.0, 30.0, max, min), min);
    }

    #[test]
    fn ratios_ignore_power_of_two_rescaling(e in prop::array::uniform5(0.1f64..500.0), k in -20i32..20) {
        let s = 2f64.powi(k);
        let a = compute_all_features(&RawGeometry::new(e[0], e[1], e[2], e[3], e[4]).unwrap()).unwrap();
        let b = compute_all_features(&RawGeometry::new(e[0] * s, e[1] * s, e[2] * s, e[3] * s, e[4] * s).unwrap()).unwrap();
        for name in ["compactness", "elongation", "aspect_xy", "aspect_yz", "sphericity", "flatness"] {
            prop_assert_eq!(a[name].to_bits(), b[name].to_bits(), "{}", name);
        }
    }

    #[test]
    fn standardizer_round_trips(rows in prop::collection::vec(prop::array::uniform9(-100.0f64..100.0), 3..30)) {
        let fv: Vec<FeatureVector> = rows.iter().map(|v| FeatureVector { values: *v, category: 0 }).collect();
        let s = match Standardizer::fit(&fv) {
            Ok(s) => s,
            Err(_) => return Ok(()),
        };
        for f in &fv {
            let back = s.inverse(&s.transform(f));
            for j in 0..NUM_FEATURES {
                prop_assert!((back.values[j] - f.values[j]).abs() < 1e-9 * f.values[j].abs().max(1.0));
            }
        }
    }

    #[test]
    fn shapley_efficiency_and_null_player(values in prop::collection::vec(-50.0f64..50.0, 16), null in 0usize..5) {
        // Five players; `null` never changes the value.
        let n = 5;
        let full: Vec<f64> = (0..1usize << n)
            .map(|mask| {
                let without = mask & !(1 << null);
                let compact = (without & ((1 << null) - 1)) | ((without >> (null + 1)) << null);
                values[compact]
            })
            .collect();
        let phi = shapley_from_values(n, &full).unwrap();
        prop_assert!((phi.iter().sum::<f64>() - (full[(1 << n) - 1] - full[0])).abs() < 1e-9);
        prop_assert!(phi[null].abs() < 1e-12);
    }

    #[test]
    fn mcr_shares_nearly_sum_to_one(nv in 1e-2f64..1e3, nm in 1e-2f64..1e3) {
        let (sv, sm) = mcr(&[nv], &[0.0, -nm], MCR_EPS);
        let dev = 1.0 - sv - sm;
        prop_assert!((-1e-15..1e-8).contains(&dev));
    }

    #[test]
    fn augmentation_keeps_shape_and_range(seed in any::<u64>(), shade in 0.0f64..1.0) {
        let img = Image::filled(16, shade);
        let out = augment(&img, &AugmentConfig::default(), &mut rng_for(seed, &[5]));
        prop_assert_eq!(out.side(), 16);
        prop_assert_eq!(out.bytes().len(), img.bytes().len());
    }
}
