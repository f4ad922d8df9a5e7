//! Central finite-difference check of `loss_and_grad`.

#![allow(dead_code)]

use difficalib::classifier::{loss_and_grad, Batch};
use difficalib::{ClassifierModel, LossConfig, LossKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles::relative_error;

pub const STEP: f64 = 1e-5;

/// Distance kept between any ReLU pre-activation or logit and zero, so the
/// central difference never straddles a kink.
const KINK_MARGIN: f64 = 1e-3;

pub struct Instance {
    pub model: ClassifierModel,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
    pub cfg: LossConfig,
}

impl Instance {
    fn batch(&self) -> Batch<'_> {
        Batch {
            features: &self.features,
            labels: &self.labels,
            weights: Some(&self.weights),
        }
    }

    /// Smallest |pre-activation| of the first hidden layer and smallest
    /// |logit|, over the batch.
    fn kink_distance(&self) -> f64 {
        let sizes = self.model.sizes();
        let d = sizes[0];
        let mut nearest = f64::INFINITY;
        if sizes.len() > 2 {
            let h = sizes[1];
            let p = self.model.params();
            for x in self.features.chunks_exact(d) {
                for o in 0..h {
                    let z: f64 = (0..d).map(|c| p[o * d + c] * x[c]).sum::<f64>() + p[h * d + o];
                    nearest = nearest.min(z.abs());
                }
            }
        }
        if self.cfg.kind == LossKind::L1Norm {
            let pred = self.model.predict(&self.features).unwrap();
            for z in &pred.logits {
                nearest = nearest.min(z.abs());
            }
        }
        nearest
    }
}

/// A random small instance for `kind`, resampled until it sits away from
/// every non-differentiable point.
pub fn random_instance(kind: LossKind, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let d = rng.random_range(1..=5);
        let k = rng.random_range(2..=5);
        let mut sizes = vec![d];
        if rng.random_bool(0.5) {
            sizes.push(rng.random_range(1..=5));
        }
        sizes.push(k);
        let mut model = ClassifierModel::zeros(&sizes).unwrap();
        for p in model.params_mut() {
            *p = rng.random_range(-1.5..1.5);
        }
        let n = rng.random_range(1..=6);
        let features = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
        let weights = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let cfg = LossConfig::new(kind, k).with_alpha(rng.random_range(0.05..0.5));
        let inst = Instance {
            model,
            features,
            labels,
            weights,
            cfg,
        };
        if inst.kink_distance() > KINK_MARGIN {
            return inst;
        }
    }
}

/// Relative error between the analytic gradient and central differences.
pub fn gradient_error(inst: &Instance) -> f64 {
    let (_, analytic) = loss_and_grad(&inst.model, inst.batch(), &inst.cfg).unwrap();
    let mut model = inst.model.clone();
    let mut numeric = vec![0.0; analytic.len()];
    for j in 0..numeric.len() {
        let orig = model.params()[j];
        model.params_mut()[j] = orig + STEP;
        let (up, _) = loss_and_grad(&model, inst.batch(), &inst.cfg).unwrap();
        model.params_mut()[j] = orig - STEP;
        let (down, _) = loss_and_grad(&model, inst.batch(), &inst.cfg).unwrap();
        model.params_mut()[j] = orig;
        numeric[j] = (up - down) / (2.0 * STEP);
    }
    relative_error(&analytic, &numeric)
}
