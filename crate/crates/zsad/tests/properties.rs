//! Property-based invariants for the numeric core and the metrics.

use ndarray::{Array1, Array2};
use proptest::prelude::*;

use zsad::eval;
use zsad::losses;
use zsad::math;
use zsad::scoring::{self, FusionRule, LayerId, ScorePair};

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-50.0f64..50.0, len)
}

proptest! {
    #[test]
    fn softmax_shift_invariance(rows in finite_vec(12), shift in -30.0f64..30.0) {
        let x = Array2::from_shape_vec((3, 4), rows.clone()).unwrap();
        let shifted = x.mapv(|v| v + shift);
        let a = math::softmax_rows(&x);
        let b = math::softmax_rows(&shifted);
        for (p, q) in a.iter().zip(b.iter()) {
            prop_assert!((p - q).abs() < 1e-9);
        }
        for row in a.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn score_pair_constraint_through_fusion(vals in finite_vec(32)) {
        let d = 4;
        let g_n = Array1::from_vec(vals[..d].to_vec());
        let g_a = Array1::from_vec(vals[d..2 * d].to_vec());
        let patches = Array2::from_shape_vec((4, d), vals[2 * d..2 * d + 16].to_vec()).unwrap();
        let pair =
            scoring::segmentation_maps(&g_n, &g_a, &patches, (2, 2), 1.0, LayerId::Layer(1))
                .unwrap();
        for (n, a) in pair.s_n.iter().zip(pair.s_a.iter()) {
            prop_assert!((n + a - 1.0).abs() < 1e-5);
        }
        let fused = scoring::fuse_layers(&[pair.clone(), pair], FusionRule::Mean).unwrap();
        for (n, a) in fused.s_n.iter().zip(fused.s_a.iter()) {
            prop_assert!((n + a - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn auroc_monotone_transform_invariance(
        scores in proptest::collection::vec(-10.0f64..10.0, 8),
        labels in proptest::collection::vec(0u8..2, 8),
    ) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let base = eval::auroc(&scores, &labels).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp() + 2.0).collect();
        let after = eval::auroc(&transformed, &labels).unwrap();
        prop_assert!((base - after).abs() < 1e-9);

        let ap_base = eval::average_precision(&scores, &labels).unwrap();
        let ap_after = eval::average_precision(&transformed, &labels).unwrap();
        prop_assert!((ap_base - ap_after).abs() < 1e-9);
    }

    #[test]
    fn auroc_negation_complement(
        scores in proptest::collection::vec(-10.0f64..10.0, 8),
        labels in proptest::collection::vec(0u8..2, 8),
    ) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        // Continuous draws make ties measure-zero; negation flips the ranking.
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        let a = eval::auroc(&scores, &labels).unwrap();
        let b = eval::auroc(&negated, &labels).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pixel_auroc_is_flattened_auroc(
        map_vals in proptest::collection::vec(0.0f64..1.0, 16),
        mask_bits in proptest::collection::vec(0u8..2, 16),
    ) {
        prop_assume!(mask_bits.contains(&0) && mask_bits.contains(&1));
        let map = Array2::from_shape_vec((4, 4), map_vals.clone()).unwrap();
        let mask =
            Array2::from_shape_vec((4, 4), mask_bits.iter().map(|&b| b as f64).collect()).unwrap();
        let via_pixels = eval::pixel_auroc(&[map], &[mask]).unwrap();
        let direct = eval::auroc(&map_vals, &mask_bits).unwrap();
        prop_assert!((via_pixels - direct).abs() < 1e-12);
    }

    #[test]
    fn connected_components_match_flood_fill(mask_bits in proptest::collection::vec(0u8..2, 64)) {
        let mask =
            Array2::from_shape_vec((8, 8), mask_bits.iter().map(|&b| b as f64).collect()).unwrap();
        let regions = eval::connected_components(&mask);

        // Brute-force flood fill.
        let mut label = vec![usize::MAX; 64];
        let mut next = 0usize;
        for start in 0..64 {
            if mask_bits[start] == 0 || label[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            label[start] = next;
            while let Some(p) = stack.pop() {
                let (y, x) = (p / 8, p % 8);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if (0..8).contains(&ny) && (0..8).contains(&nx) {
                            let q = (ny * 8 + nx) as usize;
                            if mask_bits[q] == 1 && label[q] == usize::MAX {
                                label[q] = next;
                                stack.push(q);
                            }
                        }
                    }
                }
            }
            next += 1;
        }

        prop_assert_eq!(regions.len(), next);
        // Each returned region carries exactly one flood-fill label.
        for region in &regions {
            let l = label[region[0].0 * 8 + region[0].1];
            for &(y, x) in region {
                prop_assert_eq!(label[y * 8 + x], l);
            }
        }
        let total: usize = regions.iter().map(|r| r.len()).sum();
        prop_assert_eq!(total, mask_bits.iter().filter(|&&b| b == 1).count());
    }

    #[test]
    fn glocal_total_linear_in_lambda(
        global in 0.0f64..5.0,
        locals in proptest::collection::vec(0.0f64..5.0, 4),
        l1 in 0.0f64..3.0,
        l2 in 0.0f64..3.0,
    ) {
        let at = |lam: f64| losses::glocal_total(global, &locals, lam);
        let mid = at((l1 + l2) / 2.0);
        prop_assert!((mid - (at(l1) + at(l2)) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn anomaly_map_monotone_in_patch_score(
        base in proptest::collection::vec(0.05f64..0.9, 16),
        idx in 0usize..16,
        bump in 0.01f64..0.1,
    ) {
        let s_a = Array2::from_shape_vec((4, 4), base.clone()).unwrap();
        let mut raised = s_a.clone();
        raised[(idx / 4, idx % 4)] += bump;
        let pair = |a: &Array2<f64>| ScorePair {
            s_n: a.mapv(|v| 1.0 - v),
            s_a: a.clone(),
            layer_id: LayerId::Fused,
        };
        let low = scoring::compose_anomaly_map(&pair(&s_a), (32, 32), 1.0).unwrap();
        let high = scoring::compose_anomaly_map(&pair(&raised), (32, 32), 1.0).unwrap();
        for (l, h) in low.iter().zip(high.iter()) {
            prop_assert!(h + 1e-12 >= *l);
        }
    }

    #[test]
    fn losses_nonnegative_and_finite(
        probs in proptest::collection::vec(0.0f64..1.0, 16),
        mask_bits in proptest::collection::vec(0u8..2, 16),
    ) {
        let s_a = Array2::from_shape_vec((4, 4), probs).unwrap();
        let pair = ScorePair {
            s_n: s_a.mapv(|v| 1.0 - v),
            s_a: s_a.clone(),
            layer_id: LayerId::Layer(1),
        };
        let target =
            Array2::from_shape_vec((4, 4), mask_bits.iter().map(|&b| b as f64).collect()).unwrap();
        let focal = losses::focal_loss(&pair, &target, 2.0, 0.25).unwrap();
        let dice = losses::dice_loss(&s_a, &target, 1.0).unwrap();
        prop_assert!(focal.is_finite() && focal >= 0.0);
        prop_assert!(dice.is_finite() && dice >= -1e-12);
    }
}
