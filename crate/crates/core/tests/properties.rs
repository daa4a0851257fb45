//! Randomized invariants of kernels, metrics, aggregation and the data layer.

use fthnet_core::dataset::manifest::{read_manifest, write_manifest, SampleRecord};
use fthnet_core::dataset::ratings::{aggregate_mos, AggregationWeights, Level, RaterTier, RatingRecord};
use fthnet_core::dataset::DegradationSpec;
use fthnet_core::kernels::layout::cyclic_shift;
use fthnet_core::kernels::{conv2d, linear, softmax, softpool2d, window_merge, window_partition};
use fthnet_core::metrics::{average_ranks, plcc, rmse, srcc};
use fthnet_core::trainer::{lr_at, make_splits};
use fthnet_core::Tensor;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
}

/// Distinct values, so rank-based statistics have no ties.
fn tie_free(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::hash_set(-100_000i64..100_000, n).prop_map(|s| s.into_iter().map(|v| v as f64 / 7.0).collect())
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_and_conv_are_homogeneous(
        x in tensor(vec![1, 5, 5, 2]),
        w in tensor(vec![3, 3, 2, 3]),
        lw in tensor(vec![2, 4]),
        a in -3.0f64..3.0,
    ) {
        let ax = x.map(|v| a * v);
        let y = conv2d(&x, &w, None, 1, 1).unwrap().map(|v| a * v);
        prop_assert!(close(&conv2d(&ax, &w, None, 1, 1).unwrap(), &y, 1e-6));
        let y = linear(&x, &lw, None).unwrap().map(|v| a * v);
        prop_assert!(close(&linear(&ax, &lw, None).unwrap(), &y, 1e-6));
    }

    #[test]
    fn softmax_rows_sum_to_one(x in tensor(vec![3, 7])) {
        let y = softmax(&x);
        for row in y.data().chunks(7) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn softpool_stays_within_region(x in tensor(vec![1, 6, 6, 2])) {
        let y = softpool2d(&x, 3, 3).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                for c in 0..2 {
                    let region: Vec<f64> = (0..3)
                        .flat_map(|dy| (0..3).map(move |dx| (dy, dx)))
                        .map(|(dy, dx)| x.data()[((oy * 3 + dy) * 6 + ox * 3 + dx) * 2 + c])
                        .collect();
                    let v = y.data()[(oy * 2 + ox) * 2 + c];
                    let lo = region.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = region.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn layout_round_trips_are_bitwise(
        (h, w, window) in (1usize..4, 1usize..4, 1usize..4).prop_map(|(a, b, k)| (a * k, b * k, k)),
        c in 1usize..4,
        offset in -3isize..=3,
    ) {
        let x = Tensor::from_fn(&[h, w, c], |i| (i as f64).sin());
        let merged = window_merge(&window_partition(&x, window).unwrap(), h, w, window).unwrap();
        prop_assert_eq!(merged.data(), x.data());
        if offset.unsigned_abs() < h.min(w) {
            let back = cyclic_shift(&cyclic_shift(&x, offset).unwrap(), -offset).unwrap();
            prop_assert_eq!(back.data(), x.data());
        }
    }

    #[test]
    fn srcc_ignores_monotone_transforms(pair in (5usize..40).prop_flat_map(|n| (tie_free(n), tie_free(n)))) {
        let (a, b) = pair;
        let base = srcc(&a, &b).unwrap();
        let a3: Vec<f64> = a.iter().map(|v| v.powi(3) + 2.0 * v).collect();
        let bexp: Vec<f64> = b.iter().map(|v| (v / 5000.0).exp()).collect();
        prop_assert!((srcc(&a3, &bexp).unwrap() - base).abs() <= 1e-9);
        let affine: Vec<f64> = a.iter().map(|v| 3.5 * v - 11.0).collect();
        prop_assert!((plcc(&affine, &b).unwrap() - plcc(&a, &b).unwrap()).abs() <= 1e-9);
        // closed form against Pearson of ranks
        let rank_pearson = pearson(&average_ranks(&a), &average_ranks(&b));
        prop_assert!((base - rank_pearson).abs() <= 1e-12);
        prop_assert_eq!(rmse(&a, &b).unwrap().to_bits(), rmse(&b, &a).unwrap().to_bits());
    }

    #[test]
    fn aggregation_is_linear_and_order_free(
        e in prop::array::uniform3(0u8..=100),
        j in prop::array::uniform3(0u8..=100),
        k in 0u8..=100,
    ) {
        let ratings = |e: [u8; 3], j: [u8; 3]| -> Vec<RatingRecord> {
            e.iter()
                .map(|&s| (RaterTier::Experienced, s))
                .chain(j.iter().map(|&s| (RaterTier::Junior, s)))
                .enumerate()
                .map(|(i, (tier, score))| RatingRecord { rater_id: format!("r{i}"), tier, score, level: Level::Usable })
                .collect()
        };
        let w = AggregationWeights::default();
        let m = aggregate_mos(&ratings(e, j), &w).unwrap();
        let permuted = aggregate_mos(&ratings([e[2], e[0], e[1]], [j[1], j[2], j[0]]), &w).unwrap();
        prop_assert!((m - permuted).abs() <= 1e-12);
        // replacing one experienced score shifts MOS by λ times the change
        let changed = aggregate_mos(&ratings([k, e[1], e[2]], j), &w).unwrap();
        prop_assert!((changed - m - 0.22 * (f64::from(k) - f64::from(e[0]))).abs() <= 1e-9);
    }

    #[test]
    fn pseudo_mos_decreases_in_every_severity(
        base in prop::array::uniform4(0.0f64..1.0),
        axis in 0usize..4,
        bump in 1e-6f64..1.0,
    ) {
        let spec = |v: [f64; 4]| DegradationSpec { blur: v[0], haze: v[1], illumination: v[2], darkness: v[3], seed: 0 };
        let mut worse = base;
        worse[axis] = (worse[axis] + bump).min(1.0);
        prop_assume!(worse[axis] > base[axis]);
        prop_assert!(spec(worse).pseudo_mos() < spec(base).pseudo_mos());
    }

    #[test]
    fn manifest_round_trip_is_lossless(
        rows in prop::collection::vec(
            (
                "[a-z]{1,8}/[a-z0-9_]{1,10}\\.png",
                0.0f64..=100.0,
                prop::sample::select(vec![Level::Good, Level::Usable, Level::Reject]),
                prop::collection::vec(0u8..=100, 0..=3),
                prop::collection::vec(0u8..=100, 0..=3),
            ),
            0..12,
        )
    ) {
        let records: Vec<SampleRecord> = rows
            .into_iter()
            .map(|(p, mos, level, experienced, junior)| SampleRecord { image_path: p, mos, level, experienced, junior })
            .collect();
        let mut buf = Vec::new();
        write_manifest(&records, &mut buf).unwrap();
        prop_assert_eq!(read_manifest(buf.as_slice()).unwrap(), records);
    }

    #[test]
    fn schedule_is_continuous_and_peaks_at_warmup(warmup in 1usize..200, extra in 1usize..2000, peak in 1e-6f64..1e-2) {
        let max = warmup + extra;
        let at = |i| lr_at(i, peak, warmup, max);
        prop_assert_eq!(at(warmup), peak);
        for i in 0..max {
            prop_assert!(at(i) <= peak);
            // piecewise linear with slopes peak/warmup and peak/extra
            let step = (at(i + 1) - at(i)).abs();
            prop_assert!(step <= peak / warmup.min(extra) as f64 + 1e-15);
        }
        prop_assert_eq!(at(max), 0.0);
    }

    #[test]
    fn splits_partition_every_round(n in 20usize..300, seed in any::<u64>()) {
        let plan = make_splits(n, 3, seed).unwrap();
        for s in &plan.rounds {
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).chain(&s.val).copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!((s.train.len() as f64 - 0.8 * n as f64).abs() <= 1.0);
            prop_assert!((s.test.len() as f64 - 0.15 * n as f64).abs() <= 1.0);
        }
    }
}
