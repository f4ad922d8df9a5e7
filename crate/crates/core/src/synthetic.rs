//! Gaussian-mixture embedding fixtures and controlled perturbations.
//!
//! Every draw comes from a stream keyed by `(seed, sample id)` (see
//! [`crate::rng`]), so outputs are pure functions of their inputs.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::embedding_store::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixtureSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Typical distance between class means, in within-class standard deviations.
    pub separation: f64,
    pub seed: u64,
}

impl MixtureSpec {
    /// Overlapping-cluster fixture: 10 classes, 16 dimensions, 500 samples
    /// per class, separation 3, seed 7.
    pub fn canonical() -> Self {
        Self {
            num_classes: 10,
            dim: 16,
            samples_per_class: 500,
            separation: 3.0,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.dim == 0 || self.samples_per_class == 0 {
            return Err(Error::Validation(format!(
                "mixture needs K ≥ 2, D ≥ 1 and at least one sample per class, got {self:?}"
            )));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::Validation("separation must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Class means on a sphere of radius `separation/√2`, so two means in
    /// (near-)orthogonal random directions sit about `separation` apart.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let radius = self.separation / std::f64::consts::SQRT_2;
        (0..self.num_classes)
            .map(|k| {
                let mut rng = stream(self.seed, Domain::ClassMeans, k as u64);
                let dir: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                dir.into_iter().map(|v| v / norm * radius).collect()
            })
            .collect()
    }
}

/// Unit-covariance Gaussian clusters, rows grouped by class, ids `0..N`.
pub fn generate_mixture(spec: &MixtureSpec) -> Result<EmbeddingDataset> {
    spec.validate()?;
    let means = spec.class_means();
    let n = spec.num_classes * spec.samples_per_class;
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (k, mean) in means.iter().enumerate() {
        for j in 0..spec.samples_per_class {
            let id = (k * spec.samples_per_class + j) as u64;
            let mut rng = stream(spec.seed, Domain::MixtureSamples, id);
            for &m in mean {
                let z: f64 = rng.sample(StandardNormal);
                features.push((m + z) as f32);
            }
            labels.push(k as u32);
        }
    }
    EmbeddingDataset::new(features, spec.dim, labels, (0..n as u64).collect(), spec.num_classes)
}

/// `⌈fraction·n⌉`, immune to representation error such as `0.7·100`.
fn ceil_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Row indices ordered by a per-id pseudo-random key.
fn keyed_order(ds: &EmbeddingDataset, seed: u64, domain: Domain) -> Vec<usize> {
    let keys: Vec<u64> = ds.ids().iter().map(|&id| stream(seed, domain, id).random()).collect();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by_key(|&i| (keys[i], ds.ids()[i]));
    order
}

/// Reassign `⌈rate·N⌉` labels, each uniformly among the other `K−1` classes.
pub fn inject_label_noise(ds: &EmbeddingDataset, rate: f64, seed: u64) -> Result<EmbeddingDataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Validation(format!("label-noise rate {rate} outside [0, 1]")));
    }
    let flips = ceil_count(rate, ds.len());
    let k = ds.num_classes() as u32;
    let mut labels = ds.labels().to_vec();
    for &i in keyed_order(ds, seed, Domain::LabelNoiseSelect).iter().take(flips) {
        let r = stream(seed, Domain::LabelNoiseValue, ds.ids()[i]).random_range(0..k - 1);
        labels[i] = if r >= labels[i] { r + 1 } else { r };
    }
    ds.with_labels(labels)
}

/// Add isotropic Gaussian noise of standard deviation `sigma` to every row.
pub fn inject_feature_noise(ds: &EmbeddingDataset, sigma: f64, seed: u64) -> Result<EmbeddingDataset> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Validation(format!("noise sigma must be nonnegative, got {sigma}")));
    }
    let d = ds.dim();
    let mut features = ds.features().to_vec();
    for (i, &id) in ds.ids().iter().enumerate() {
        let mut rng = stream(seed, Domain::FeatureNoise, id);
        for v in &mut features[i * d..(i + 1) * d] {
            let z: f64 = rng.sample(StandardNormal);
            *v = (*v as f64 + sigma * z) as f32;
        }
    }
    ds.with_features(features)
}

/// Seeded split into `(kept, held_out)` with `⌈fraction·N⌉` held out.
/// Both parts keep the original row order.
pub fn split(ds: &EmbeddingDataset, fraction: f64, seed: u64) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Validation(format!("split fraction {fraction} outside [0, 1)")));
    }
    let held = ceil_count(fraction, ds.len());
    let mut out = vec![false; ds.len()];
    for &i in keyed_order(ds, seed, Domain::Split).iter().take(held) {
        out[i] = true;
    }
    let kept: Vec<usize> = (0..ds.len()).filter(|&i| !out[i]).collect();
    let held: Vec<usize> = (0..ds.len()).filter(|&i| out[i]).collect();
    Ok((ds.subset(&kept)?, ds.subset(&held)?))
}

/// Remove one class as an out-of-distribution set. The in-distribution part
/// is relabeled to `0..K−1`; the OOD part keeps its original labels and `K`.
pub fn hold_out_class(ds: &EmbeddingDataset, class: usize) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    if class >= ds.num_classes() {
        return Err(Error::ClassIndex {
            index: class,
            num_classes: ds.num_classes(),
        });
    }
    if ds.num_classes() < 3 {
        return Err(Error::Validation("holding out a class needs at least 3 classes".into()));
    }
    let (inside, outside): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| ds.label(i) != class);
    let kept = ds.subset(&inside)?;
    let relabeled: Vec<u32> = kept
        .labels()
        .iter()
        .map(|&y| if y as usize > class { y - 1 } else { y })
        .collect();
    let kept = EmbeddingDataset::new(
        kept.features().to_vec(),
        kept.dim(),
        relabeled,
        kept.ids().to_vec(),
        ds.num_classes() - 1,
    )?;
    Ok((kept, ds.subset(&outside)?))
}
