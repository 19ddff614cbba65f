mod support;

use proptest::prelude::*;
use spinevox_core::mask::Mask3D;
use spinevox_core::metrics::{cohen_kappa, composite_score, fleiss_kappa, hd95, overlap_metrics, roc_auc, SegScores};
use spinevox_core::volgrid::{Dims, Spacing};
use support::brute;

fn mask_pair() -> impl Strategy<Value = (Mask3D, Mask3D)> {
    (1..=5usize, 1..=6usize, 1..=6usize).prop_flat_map(|(z, y, x)| {
        let d = Dims::new(z, y, x);
        let m = move || prop::collection::vec(prop::bool::weighted(0.3), d.len()).prop_map(move |data| Mask3D { dims: d, data });
        (m(), m())
    })
}

fn spacing() -> impl Strategy<Value = Spacing> {
    (0.3f64..3.0, 0.3f64..3.0, 0.3f64..3.0).prop_map(|(z, y, x)| Spacing::new(z, y, x))
}

fn pts(m: &Mask3D, s: Spacing) -> Vec<[f64; 3]> {
    brute::points(&m.data, (m.dims.z, m.dims.y, m.dims.x), [s.z, s.y, s.x])
}

proptest! {
    #[test]
    fn dice_follows_from_iou((a, b) in mask_pair()) {
        let o = overlap_metrics(&a, &b).unwrap();
        prop_assert!((o.dice - 2.0 * o.iou / (1.0 + o.iou)).abs() <= 1e-12);
    }

    #[test]
    fn hd95_is_symmetric_and_matches_scan((a, b) in mask_pair(), s in spacing()) {
        prop_assume!(!a.is_empty() && !b.is_empty());
        let ab = hd95(&a, &b, s).unwrap();
        prop_assert_eq!(ab, hd95(&b, &a, s).unwrap());
        let (pa, pb) = (pts(&a, s), pts(&b, s));
        prop_assert!((ab - brute::hd95(&pa, &pb)).abs() <= 1e-9);
        prop_assert!(ab <= brute::hausdorff(&pa, &pb) + 1e-9);
    }

    #[test]
    fn auc_ignores_monotone_rescoring(pairs in prop::collection::vec((0u32..20, any::<bool>()), 2..60)) {
        prop_assume!(pairs.iter().any(|p| p.1) && pairs.iter().any(|p| !p.1));
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let raw: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let warped: Vec<f64> = raw.iter().map(|v| (v / 3.0).exp() - 7.0).collect();
        prop_assert_eq!(roc_auc(&raw, &labels).unwrap(), roc_auc(&warped, &labels).unwrap());
    }

    #[test]
    fn cohen_is_symmetric_and_bounded(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..80)) {
        let (a, b): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let ab = cohen_kappa(&a, &b).unwrap();
        prop_assert_eq!(ab.kappa, cohen_kappa(&b, &a).unwrap().kappa);
        prop_assert!((-1.0..=1.0).contains(&ab.kappa));
    }

    /// With equal marginals the pooled and per-rater chance terms coincide.
    #[test]
    fn fleiss_matches_cohen_with_shared_marginals(
        a in prop::collection::vec(any::<bool>(), 2..60),
        order in any::<prop::sample::Index>(),
    ) {
        let n = a.len();
        let shift = order.index(n);
        let b: Vec<bool> = (0..n).map(|i| a[(i + shift) % n]).collect();
        let cohen = cohen_kappa(&a, &b).unwrap();
        prop_assume!(!cohen.degenerate);
        let counts: Vec<Vec<u32>> = a
            .iter()
            .zip(&b)
            .map(|(&x, &y)| {
                let pos = x as u32 + y as u32;
                vec![2 - pos, pos]
            })
            .collect();
        let fleiss = fleiss_kappa(&counts, 2).unwrap();
        prop_assert!((fleiss.kappa - cohen.kappa).abs() <= 1e-9, "{} vs {}", fleiss.kappa, cohen.kappa);
    }

    #[test]
    fn composite_score_ignores_column_units(
        rows in prop::collection::vec((0.01f64..1.0, 0.01f64..1.0, 0.1f64..50.0), 1..10),
        column in 0usize..3,
        factor in 0.01f64..100.0,
    ) {
        let entries: Vec<SegScores> = rows.iter().map(|&(iou, dice, hd95)| SegScores { iou, dice, hd95 }).collect();
        let scaled: Vec<SegScores> = entries
            .iter()
            .map(|e| {
                let mut e = *e;
                match column {
                    0 => e.iou *= factor,
                    1 => e.dice *= factor,
                    _ => e.hd95 *= factor,
                }
                e
            })
            .collect();
        let a = composite_score(&entries).unwrap();
        let b = composite_score(&scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}
