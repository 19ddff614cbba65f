use proptest::prelude::*;
use spinevox_core::aggregate::{
    majority_vote, patient_adaptive, score_fuse, weighted_bce, AdaptiveParams, Model, PredictionRow, PredictionTable,
};

const STACKS: usize = 15;

fn probs() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, STACKS)
}

fn params() -> impl Strategy<Value = AdaptiveParams> {
    (0.01f64..0.98, 0.0f64..1.0, 0.01f64..2.0).prop_map(|(lo, frac, d_ref)| AdaptiveParams {
        thr_low: lo,
        thr_high: lo + frac * (0.99 - lo),
        d_ref,
    })
}

/// `probs[model][vertebra][stack]`
fn table(probs: &[Vec<Vec<f64>>; 2]) -> PredictionTable {
    let mut t = PredictionTable::default();
    for (m, model) in [Model::A, Model::B].into_iter().enumerate() {
        for (v, stacks) in probs[m].iter().enumerate() {
            for (s, &prob) in stacks.iter().enumerate() {
                t.insert(PredictionRow {
                    patient_id: "p".into(),
                    vertebra: v as u8 + 1,
                    stack_index: s,
                    model,
                    prob,
                })
                .unwrap();
            }
        }
    }
    t
}

fn model_probs() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(probs(), 7)
}

fn plain_bce(y: &[u8], p: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&t, &q) in y.iter().zip(p) {
        let q = q.clamp(1e-7, 1.0 - 1e-7);
        s += if t == 1 { -q.ln() } else { -(1.0 - q).ln() };
    }
    s / y.len() as f64
}

proptest! {
    #[test]
    fn vote_ignores_stack_order(p in probs(), thr in 0.0f64..1.0, order in Just((0..STACKS).collect::<Vec<_>>()).prop_shuffle()) {
        let shuffled: Vec<f64> = order.iter().map(|&i| p[i]).collect();
        prop_assert_eq!(majority_vote(&p, thr).unwrap(), majority_vote(&shuffled, thr).unwrap());
    }

    #[test]
    fn fusion_swaps_with_complementary_weight(a in probs(), b in probs(), w in 0.0f64..=1.0) {
        let ab = score_fuse(&a, &b, w).unwrap();
        let ba = score_fuse(&b, &a, 1.0 - w).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn threshold_stays_in_band(p in params(), d in 0.0f64..10.0) {
        let t = p.threshold(d);
        prop_assert!(t >= p.thr_low && t <= p.thr_high, "{} outside [{}, {}]", t, p.thr_low, p.thr_high);
    }

    /// Raising one stack of the top vertebra in both models keeps the
    /// disagreement and can only turn the patient positive.
    #[test]
    fn adaptive_decision_is_monotone(a in model_probs(), b in model_probs(), p in params(), stack in 0..STACKS, bump in 0.0f64..1.0) {
        let probs = [a, b];
        let before = patient_adaptive(&table(&probs), "p", &p).unwrap();
        prop_assert!(before.threshold >= p.thr_low && before.threshold <= p.thr_high);
        let mean = |m: &Vec<f64>| m.iter().sum::<f64>() / STACKS as f64;
        let top = (0..7)
            .max_by(|&i, &j| {
                let u = |v: usize| mean(&probs[0][v]) + mean(&probs[1][v]);
                u(i).total_cmp(&u(j))
            })
            .unwrap();
        let room = (1.0 - probs[0][top][stack]).min(1.0 - probs[1][top][stack]);
        let delta = bump * room;
        let mut raised = probs.clone();
        raised[0][top][stack] += delta;
        raised[1][top][stack] += delta;
        let after = patient_adaptive(&table(&raised), "p", &p).unwrap();
        prop_assert!((after.disagreement - before.disagreement).abs() < 1e-9);
        prop_assert!(after.score >= before.score - 1e-12);
        prop_assert!(after.decision >= before.decision);
    }

    #[test]
    fn bce_is_non_negative(pairs in prop::collection::vec((0u8..=1, 0.0f64..=1.0), 1..40), w in 0.1f64..10.0) {
        let (y, p): (Vec<u8>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert!(weighted_bce(&y, &p, w).unwrap() >= 0.0);
    }

    #[test]
    fn bce_falls_as_positive_prediction_rises(
        pairs in prop::collection::vec((0u8..=1, 0.01f64..0.99), 1..20),
        i in any::<prop::sample::Index>(),
        step in 0.001f64..0.5,
    ) {
        let (mut y, p): (Vec<u8>, Vec<f64>) = pairs.into_iter().unzip();
        let i = i.index(y.len());
        y[i] = 1;
        let mut higher = p.clone();
        higher[i] = (p[i] + step).min(0.999);
        prop_assume!(higher[i] > p[i]);
        prop_assert!(weighted_bce(&y, &higher, 2.0).unwrap() < weighted_bce(&y, &p, 2.0).unwrap());
    }

    #[test]
    fn unit_weight_bce_is_plain_bce(pairs in prop::collection::vec((0u8..=1, 0.0f64..=1.0), 1..64)) {
        let (y, p): (Vec<u8>, Vec<f64>) = pairs.into_iter().unzip();
        let got = weighted_bce(&y, &p, 1.0).unwrap();
        let want = plain_bce(&y, &p);
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1.0));
    }
}
