mod common;

use common::gradcheck::{gradient_error, random_instance};
use difficalib::classifier::{entropy, loss_and_grad, per_sample_loss, softmax, Batch};
use difficalib::{ClassifierModel, LossConfig, LossKind};
use proptest::prelude::*;

#[test]
fn analytic_gradients_match_finite_differences() {
    for kind in LossKind::ALL {
        let mut worst: f64 = 0.0;
        for seed in 0..25 {
            worst = worst.max(gradient_error(&random_instance(kind, 1000 + seed)));
        }
        assert!(worst < 1e-6, "{kind}: worst relative error {worst:e}");
    }
}

#[test]
fn softmax_examples() {
    let p = softmax(&[3f64.ln(), 0.0]);
    assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    let z = [0.2, -1.3, 4.0];
    let shifted: Vec<f64> = z.iter().map(|v| v + 100.0).collect();
    for (a, b) in softmax(&z).iter().zip(softmax(&shifted)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn entropy_examples() {
    let h = entropy(&[0.1; 10], 10).unwrap();
    assert!((h[0] - 10f64.ln()).abs() < 1e-12);
    assert_eq!(entropy(&[0.0, 1.0, 0.0], 3).unwrap(), vec![0.0]);
    let h = entropy(&[0.75, 0.25], 2).unwrap()[0];
    assert!((h - 0.56234).abs() < 5e-6);
    assert!(entropy(&[0.5, 0.6], 2).is_err());
}

fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
    (2usize..8).prop_flat_map(|k| prop::collection::vec(-30.0f64..30.0, k))
}

proptest! {
    #[test]
    fn entropy_is_bounded(z in logits_strategy()) {
        let k = z.len();
        let h = entropy(&softmax(&z), k).unwrap()[0];
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (k as f64).ln() + 1e-12);
    }

    #[test]
    fn regularization_pressure_is_monotone_in_weight(
        z in logits_strategy(),
        label_seed in 0usize..100,
        s1 in 0.0f64..1.0,
        s2 in 0.0f64..1.0,
        alpha in 0.01f64..0.5,
    ) {
        let k = z.len();
        let cfg = LossConfig::new(LossKind::DifficultyEr, k).with_alpha(alpha);
        let (lo, hi) = if s1 < s2 { (s1, s2) } else { (s2, s1) };
        let a = per_sample_loss(&z, label_seed % k, lo, &cfg).0;
        let b = per_sample_loss(&z, label_seed % k, hi, &cfg).0;
        let h = entropy(&softmax(&z), k).unwrap()[0];
        prop_assert!(b <= a);
        if h > 1e-6 && hi - lo > 1e-6 {
            prop_assert!(b < a);
        }
    }
}

fn small_batch() -> (ClassifierModel, Vec<f64>, Vec<usize>) {
    let model = ClassifierModel::init(&[3, 4, 3], 9).unwrap();
    let features = vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5, -2.0, 1.0, 0.25];
    (model, features, vec![0, 2, 1])
}

#[test]
fn constant_weight_er_equals_unit_difficulty_weights() {
    let (model, features, labels) = small_batch();
    let ones = vec![1.0; 3];
    let er = loss_and_grad(
        &model,
        Batch { features: &features, labels: &labels, weights: None },
        &LossConfig::new(LossKind::ErConst, 3),
    )
    .unwrap();
    let dw = loss_and_grad(
        &model,
        Batch { features: &features, labels: &labels, weights: Some(&ones) },
        &LossConfig::new(LossKind::DifficultyEr, 3),
    )
    .unwrap();
    assert_eq!(er.0.to_bits(), dw.0.to_bits());
    assert!(er.1.iter().zip(&dw.1).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn baselines_ignore_weights() {
    let (model, features, labels) = small_batch();
    let w = vec![0.2, 0.9, 0.4];
    for kind in LossKind::ALL.into_iter().filter(|k| *k != LossKind::DifficultyEr) {
        let cfg = LossConfig::new(kind, 3);
        let with = loss_and_grad(&model, Batch { features: &features, labels: &labels, weights: Some(&w) }, &cfg);
        let without = loss_and_grad(&model, Batch { features: &features, labels: &labels, weights: None }, &cfg);
        assert_eq!(with.unwrap(), without.unwrap(), "{kind}");
    }
}

#[test]
fn baseline_losses_at_a_known_point() {
    // K = 2, logits (ln 3, 0): p = (0.75, 0.25), label 0
    let z = [3f64.ln(), 0.0];
    let ce = -(0.75f64).ln();
    let check = |kind: LossKind, expect: f64| {
        let got = per_sample_loss(&z, 0, 0.5, &LossConfig::new(kind, 2)).0;
        assert!((got - expect).abs() < 1e-12, "{kind}: {got} vs {expect}");
    };
    check(LossKind::Ce, ce);
    check(LossKind::Ls, -(0.95 * 0.75f64.ln() + 0.05 * 0.25f64.ln()));
    check(LossKind::Focal, 0.25f64.powi(3) * ce);
    check(LossKind::L1Norm, ce + 0.01 * 3f64.ln() / 2.0);
    check(LossKind::Poly1, ce + 2.0 * 0.25);
    let h = -(0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
    check(LossKind::ErConst, ce - 0.3 * h);
    check(LossKind::DifficultyEr, ce - 0.3 * 0.5 * h);
}
