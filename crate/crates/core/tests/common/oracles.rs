//! Slow, independent reference implementations used as test oracles.
//!
//! Nothing here calls into the library; every routine is written from the
//! textbook definition so that agreement is meaningful.

#![allow(dead_code)]

/// Inverse of a row-major `d × d` matrix by Gauss-Jordan elimination with
/// partial pivoting.
pub fn invert(a: &[f64], d: usize) -> Vec<f64> {
    let w = 2 * d;
    let mut m = vec![0.0; d * w];
    for r in 0..d {
        m[r * w..r * w + d].copy_from_slice(&a[r * d..(r + 1) * d]);
        m[r * w + d + r] = 1.0;
    }
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&x, &y| m[x * w + col].abs().total_cmp(&m[y * w + col].abs()))
            .unwrap();
        if pivot != col {
            for j in 0..w {
                m.swap(col * w + j, pivot * w + j);
            }
        }
        let p = m[col * w + col];
        assert!(p.abs() > 1e-300, "singular matrix");
        for j in 0..w {
            m[col * w + j] /= p;
        }
        for r in 0..d {
            if r != col {
                let f = m[r * w + col];
                if f != 0.0 {
                    for j in 0..w {
                        m[r * w + j] -= f * m[col * w + j];
                    }
                }
            }
        }
    }
    let mut inv = vec![0.0; d * d];
    for r in 0..d {
        inv[r * d..(r + 1) * d].copy_from_slice(&m[r * w + d..(r + 1) * w]);
    }
    inv
}

/// `vᵀ M v` for row-major `M`.
pub fn quad_form(m: &[f64], v: &[f64]) -> f64 {
    let d = v.len();
    let mut total = 0.0;
    for i in 0..d {
        for j in 0..d {
            total += v[i] * m[i * d + j] * v[j];
        }
    }
    total
}

/// Squared Mahalanobis distance through an explicit inverse.
pub fn mahalanobis_by_inverse(cov: &[f64], mean: &[f64], x: &[f64]) -> f64 {
    let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    quad_form(&invert(cov, mean.len()), &diff)
}

/// `A Aᵀ + ridge·I` for row-major `A` (`d × d`).
pub fn gram_plus_ridge(a: &[f64], d: usize, ridge: f64) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum();
        }
        out[i * d + i] += ridge;
    }
    out
}

/// `P(score_pos > score_neg) + ½ P(tie)` by counting every pair.
pub fn pairwise_auroc(scores: &[f64], positives: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !positives[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positives[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// FPR at the largest threshold `t` (over observed scores) for which
/// flagging `score ≥ t` reaches TPR ≥ 0.95.
pub fn sweep_fpr95(scores: &[f64], positives: &[bool]) -> f64 {
    let n_pos = positives.iter().filter(|&&p| p).count() as f64;
    let n_neg = positives.len() as f64 - n_pos;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    for t in thresholds {
        let tp = (0..scores.len()).filter(|&i| positives[i] && scores[i] >= t).count() as f64;
        if tp / n_pos >= 0.95 {
            let fp = (0..scores.len()).filter(|&i| !positives[i] && scores[i] >= t).count() as f64;
            return fp / n_neg;
        }
    }
    unreachable!("the lowest threshold flags every positive")
}

/// Equal-mass ECE from per-sample confidence and correctness. Ranks are
/// assigned by counting, and bin `b` covers ranks
/// `[b·⌊N/B⌋ + min(b, N mod B), …)`.
pub fn brute_ece(conf: &[f64], correct: &[bool], bins: usize) -> f64 {
    let n = conf.len();
    let rank: Vec<usize> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| conf[j] < conf[i] || (conf[j] == conf[i] && j < i))
                .count()
        })
        .collect();
    let (base, extra) = (n / bins, n % bins);
    let start = |b: usize| b * base + b.min(extra);
    let mut total = 0.0;
    for b in 0..bins {
        let members: Vec<usize> = (0..n).filter(|&i| rank[i] >= start(b) && rank[i] < start(b + 1)).collect();
        let m = members.len() as f64;
        let c: f64 = members.iter().map(|&i| conf[i]).sum::<f64>() / m;
        let a = members.iter().filter(|&&i| correct[i]).count() as f64 / m;
        total += m / n as f64 * (a - c).abs();
    }
    total
}

/// Accuracy after removing the `⌈num·N/den⌉` most uncertain samples (ties
/// removed in ascending index order), computed with integer arithmetic.
pub fn brute_selective_accuracy(uncertainty: &[f64], correct: &[bool], num: usize, den: usize) -> Option<f64> {
    let n = uncertainty.len();
    let reject = (num * n).div_ceil(den);
    let mut removed = vec![false; n];
    for _ in 0..reject {
        let worst = (0..n)
            .filter(|&i| !removed[i])
            .max_by(|&a, &b| uncertainty[a].total_cmp(&uncertainty[b]).then(b.cmp(&a)))
            .unwrap();
        removed[worst] = true;
    }
    let kept: Vec<usize> = (0..n).filter(|&i| !removed[i]).collect();
    if kept.is_empty() {
        None
    } else {
        Some(kept.iter().filter(|&&i| correct[i]).count() as f64 / kept.len() as f64)
    }
}

/// Eq. 9 written literally: `exp(r_i/T) / (max_j exp(r_j/T) + c)`.
pub fn naive_weights(rmd: &[f64], t: f64, c: f64) -> Vec<f64> {
    let e: Vec<f64> = rmd.iter().map(|r| (r / t).exp()).collect();
    let max = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    e.iter().map(|v| v / (max + c)).collect()
}

/// Average ranks (1-based, ties share their mean rank).
pub fn ranks(v: &[f64]) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let below = v.iter().filter(|&&x| x < v[i]).count() as f64;
            let tied = v.iter().filter(|&&x| x == v[i]).count() as f64;
            below + (tied + 1.0) / 2.0
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute gap when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}
