//! Lloyd's k-means with k-means++ seeding, used as an alternative
//! difficulty proxy (squared distance to the nearest centroid).

use rand::Rng;

use crate::embedding_store::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansParams {
    pub clusters: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            clusters: 10,
            iters: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    /// Final centroids, `clusters × D` row-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Centroids after seeding and after every update step.
    pub trace: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the closest centroid; ties go to the lower index.
pub fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, centre);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_plus_plus(points: &[f64], n: usize, dim: usize, params: &KMeansParams) -> Vec<f64> {
    let mut rng = stream(params.seed, Domain::KMeans, 0);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = points[first * dim..(first + 1) * dim].to_vec();
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(&points[i * dim..(i + 1) * dim], &centroids))
        .collect();
    while centroids.len() < params.clusters * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target just above the accumulated sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // every point coincides with a centroid: fall back to an unused index
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let centre = &points[pick * dim..(pick + 1) * dim];
        centroids.extend_from_slice(centre);
        for i in 0..n {
            let d = sq_dist(&points[i * dim..(i + 1) * dim], centre);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

/// Cluster row-major `points` (`n × dim`).
pub fn kmeans(points: &[f64], dim: usize, params: &KMeansParams) -> Result<KMeansFit> {
    let n = points.len() / dim;
    if params.clusters == 0 {
        return Err(Error::Validation("k-means needs at least one cluster".into()));
    }
    if params.clusters > n {
        return Err(Error::Validation(format!(
            "k-means with {} clusters needs at least as many samples, got {n}",
            params.clusters
        )));
    }
    let k = params.clusters;
    let mut centroids = seed_plus_plus(points, n, dim, params);
    let mut trace = vec![centroids.clone()];
    let mut assignments = vec![usize::MAX; n];
    for _ in 0..params.iters {
        let mut changed = false;
        for i in 0..n {
            let (c, _) = nearest(&points[i * dim..(i + 1) * dim], &centroids, dim);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            for j in 0..dim {
                sums[c * dim + j] += points[i * dim + j];
            }
        }
        for c in 0..k {
            // empty clusters keep their previous centroid
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
        trace.push(centroids.clone());
    }
    for i in 0..n {
        assignments[i] = nearest(&points[i * dim..(i + 1) * dim], &centroids, dim).0;
    }
    Ok(KMeansFit {
        centroids,
        assignments,
        trace,
    })
}

/// Squared distance from each sample to its nearest final centroid.
pub fn kmeans_difficulty(ds: &EmbeddingDataset, params: &KMeansParams) -> Result<Vec<f64>> {
    let dim = ds.dim();
    let points = ds.features_f64();
    let fit = kmeans(&points, dim, params)?;
    Ok(points
        .chunks_exact(dim)
        .map(|p| nearest(p, &fit.centroids, dim).1)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(points: &[f32], dim: usize) -> EmbeddingDataset {
        let n = points.len() / dim;
        EmbeddingDataset::new(
            points.to_vec(),
            dim,
            (0..n).map(|i| (i % 2) as u32).collect(),
            (0..n as u64).collect(),
            2,
        )
        .unwrap()
    }

    #[test]
    fn one_centroid_per_point_scores_zero() {
        let d = ds(&[0.0, 1.0, 5.0, 2.0, -3.0, 7.5], 2);
        let s = kmeans_difficulty(&d, &KMeansParams { clusters: 3, iters: 10, seed: 4 }).unwrap();
        assert_eq!(s, vec![0.0; 3]);
    }

    #[test]
    fn single_cluster_is_distance_to_mean() {
        let d = ds(&[0.0, 0.0, 2.0, 0.0, 1.0, 3.0], 2);
        let s = kmeans_difficulty(&d, &KMeansParams { clusters: 1, iters: 10, seed: 1 }).unwrap();
        let mean = [1.0, 1.0];
        for (i, &v) in s.iter().enumerate() {
            let r = d.row_f64(i);
            let expect = (r[0] - mean[0]).powi(2) + (r[1] - mean[1]).powi(2);
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn too_many_clusters() {
        let d = ds(&[0.0, 1.0], 1);
        assert!(kmeans_difficulty(&d, &KMeansParams { clusters: 3, iters: 5, seed: 0 }).is_err());
    }

    #[test]
    fn duplicates_still_seed_distinct_rows() {
        let d = ds(&[1.0, 1.0, 1.0, 1.0], 1);
        let s = kmeans_difficulty(&d, &KMeansParams { clusters: 4, iters: 5, seed: 9 }).unwrap();
        assert_eq!(s, vec![0.0; 4]);
    }
}
