mod common;

use common::oracles::naive_weights;
use difficalib::difficulty::kmeans::{kmeans, KMeansParams};
use difficalib::difficulty::{
    average_scores, normalize_weights, parse_scores, rank_report, score_dataset, ScoreMethod, ScorerTag,
};
use difficalib::synthetic::{generate_mixture, MixtureSpec};
use difficalib::{DifficultyScores, EmbeddingDataset, GaussianBank};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const T: f64 = 0.7;
const C: f64 = 1e-3;

fn params() -> impl Strategy<Value = (f64, f64)> {
    (0.05f64..5.0, 1e-6f64..1.0)
}

proptest! {
    #[test]
    fn weights_lie_in_open_unit_interval(
        rmd in prop::collection::vec(-1e4f64..1e4, 1..50),
        (t, c) in params(),
    ) {
        for s in normalize_weights(&rmd, t, c).unwrap() {
            prop_assert!(s > 0.0 && s < 1.0, "{s}");
        }
    }

    #[test]
    fn weights_are_monotone_in_score(rmd in prop::collection::vec(-50.0f64..50.0, 2..40), (t, c) in params()) {
        let s = normalize_weights(&rmd, t, c).unwrap();
        for i in 0..rmd.len() {
            for j in 0..rmd.len() {
                if rmd[i] > rmd[j] {
                    prop_assert!(s[i] >= s[j]);
                    // strict wherever f64 can separate the two values
                    if s[j] > 1e-300 && (rmd[i] - rmd[j]) / t > 1e-12 {
                        prop_assert!(s[i] > s[j]);
                    }
                } else if rmd[i] == rmd[j] {
                    prop_assert_eq!(s[i], s[j]);
                }
            }
        }
    }

    #[test]
    fn largest_score_weight_has_closed_form(rmd in prop::collection::vec(-300.0f64..300.0, 1..30), (t, c) in params()) {
        let s = normalize_weights(&rmd, t, c).unwrap();
        let max = rmd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let i = rmd.iter().position(|&r| r == max).unwrap();
        let expect = 1.0 / (1.0 + c * (-max / t).exp());
        prop_assert!((s[i] - expect).abs() < 1e-12, "{} vs {}", s[i], expect);
    }

    #[test]
    fn stable_form_matches_naive_form(rmd in prop::collection::vec(-200.0f64..200.0, 1..30), (t, c) in params()) {
        let naive = naive_weights(&rmd, t, c);
        prop_assume!(naive.iter().all(|v| v.is_finite()));
        let stable = normalize_weights(&rmd, t, c).unwrap();
        for (a, b) in stable.iter().zip(&naive) {
            prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn weight_ratios_follow_score_gaps(
        rmd in prop::collection::vec(-20.0f64..20.0, 2..30),
        shift in -500.0f64..500.0,
        (t, c) in params(),
    ) {
        let shifted: Vec<f64> = rmd.iter().map(|r| r + shift).collect();
        let s = normalize_weights(&rmd, t, c).unwrap();
        let s2 = normalize_weights(&shifted, t, c).unwrap();
        for i in 0..rmd.len() {
            for j in 0..rmd.len() {
                // weights that underflowed to the clamp carry no ratio
                if s[i].min(s[j]).min(s2[i]).min(s2[j]) < 1e-300 {
                    continue;
                }
                let expect = ((rmd[i] - rmd[j]) / t).exp();
                prop_assert!((s[i] / s[j] / expect - 1.0).abs() < 1e-10);
                prop_assert!((s2[i] / s2[j] / expect - 1.0).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn extreme_scores_do_not_overflow() {
    let s = normalize_weights(&[1000.0, 999.0], T, C).unwrap();
    assert!(s.iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0));
    assert!((s[1] / s[0] - (-1.0 / T).exp()).abs() < 1e-15);
}

fn fixture() -> EmbeddingDataset {
    generate_mixture(&MixtureSpec {
        num_classes: 4,
        dim: 5,
        samples_per_class: 50,
        separation: 3.0,
        seed: 2,
    })
    .unwrap()
}

#[test]
fn averaged_scores_are_elementwise_means() {
    let ds = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let runs: Vec<DifficultyScores> = (0..5)
        .map(|_| {
            let rmd = (0..ds.len()).map(|_| rng.random_range(-10.0..10.0)).collect();
            DifficultyScores::from_raw(ds.ids().to_vec(), rmd, ScorerTag::Rmd, T, C).unwrap()
        })
        .collect();
    let avg = average_scores(&runs).unwrap();
    for i in 0..ds.len() {
        let mean = runs.iter().map(|r| r.rmd()[i]).sum::<f64>() / 5.0;
        assert!((avg.rmd()[i] - mean).abs() < 1e-12);
    }
    assert_eq!(avg.weights(), normalize_weights(avg.rmd(), T, C).unwrap());
    assert_eq!(average_scores(&runs[..1]).unwrap(), runs[0]);
}

#[test]
fn averaging_aligns_by_id() {
    let a = DifficultyScores::from_raw(vec![1, 2], vec![0.0, 2.0], ScorerTag::Rmd, T, C).unwrap();
    let b = DifficultyScores::from_raw(vec![2, 1], vec![0.0, 2.0], ScorerTag::Rmd, T, C).unwrap();
    let avg = average_scores(&[a, b]).unwrap();
    assert_eq!(avg.rmd(), &[1.0, 1.0]);
    assert_eq!(avg.weights()[0], avg.weights()[1]);
    let other_t = DifficultyScores::from_raw(vec![1, 2], vec![0.0, 0.0], ScorerTag::Rmd, 1.0, C).unwrap();
    assert!(average_scores(&[avg, other_t]).is_err());
}

#[test]
fn exported_scores_reimport_to_identical_weights() {
    let ds = fixture();
    let bank = GaussianBank::fit(&ds, 1e-4).unwrap();
    let scores = score_dataset(&ds, ScoreMethod::Rmd(&bank), T, C).unwrap();
    let back = parse_scores(&scores.to_csv(), &ds, T, C).unwrap();
    assert_eq!(back.rmd(), scores.rmd());
    assert_eq!(back.weights(), scores.weights());
    assert_eq!(back.scorer(), ScorerTag::Imported);
}

#[test]
fn import_coverage_errors() {
    let ds = fixture().subset(&[0, 1]).unwrap();
    assert!(parse_scores("id,score\n0,1.0\n", &ds, T, C).is_err());
    assert!(parse_scores("0,1\n1,2\n7,3\n", &ds, T, C).is_err());
    let flat = parse_scores("0,4.5\n1,4.5\n", &ds, T, C).unwrap();
    assert_eq!(flat.weights()[0], flat.weights()[1]);
}

#[test]
fn scorer_variants() {
    let ds = fixture();
    let bank = GaussianBank::fit(&ds, 1e-4).unwrap();
    let rmd = score_dataset(&ds, ScoreMethod::Rmd(&bank), T, C).unwrap();
    let md = score_dataset(&ds, ScoreMethod::Md(&bank), T, C).unwrap();
    for i in 0..ds.len() {
        let x = ds.row_f64(i);
        let class = bank.mahalanobis_class(&x, ds.label(i)).unwrap();
        assert_eq!(md.rmd()[i], class);
        assert_eq!(rmd.rmd()[i], class - bank.mahalanobis_agnostic(&x).unwrap());
    }
    let km = score_dataset(&ds, ScoreMethod::KMeans(KMeansParams { clusters: 1, iters: 5, seed: 0 }), T, C).unwrap();
    let mean: Vec<f64> = (0..5).map(|j| (0..ds.len()).map(|i| ds.row_f64(i)[j]).sum::<f64>() / ds.len() as f64).collect();
    for i in 0..ds.len() {
        let d: f64 = ds.row_f64(i).iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum();
        assert!((km.rmd()[i] - d).abs() < 1e-9);
    }
}

#[test]
fn kmeans_cost_never_increases() {
    let ds = fixture();
    let points = ds.features_f64();
    for seed in 0..5 {
        let fit = kmeans(&points, 5, &KMeansParams { clusters: 6, iters: 100, seed }).unwrap();
        let costs: Vec<f64> = fit
            .trace
            .iter()
            .map(|centroids| {
                points
                    .chunks_exact(5)
                    .map(|p| {
                        centroids
                            .chunks_exact(5)
                            .map(|c| p.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                            .fold(f64::INFINITY, f64::min)
                    })
                    .sum()
            })
            .collect();
        assert!(costs.len() >= 2);
        for w in costs.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{costs:?}");
        }
    }
}

#[test]
fn rank_report_orders_within_class() {
    let ds = fixture();
    let bank = GaussianBank::fit(&ds, 1e-4).unwrap();
    let scores = score_dataset(&ds, ScoreMethod::Rmd(&bank), T, C).unwrap();
    let report = rank_report(&scores, &ds, 8).unwrap();
    assert_eq!(report.len(), 4);
    for r in &report {
        let hard: Vec<f64> = r.hardest.iter().map(|&id| scores.rmd()[id as usize]).collect();
        assert!(hard.windows(2).all(|w| w[0] > w[1]));
        assert!(r.hardest.iter().all(|&id| ds.label(id as usize) == r.class));
    }
}
