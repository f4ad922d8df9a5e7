//! Per-sample objectives and their exact gradients with respect to the logits.

use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use super::{log_sum_exp, ClassifierModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy.
    Ce,
    /// Cross-entropy against smoothed targets.
    Ls,
    Focal,
    /// Cross-entropy plus a mean-absolute-logit penalty.
    L1Norm,
    /// Cross-entropy minus a constant-weight entropy bonus.
    ErConst,
    /// Cross-entropy plus `ε·(1 − p_y)`.
    Poly1,
    /// Cross-entropy minus a per-sample, difficulty-weighted entropy bonus.
    DifficultyEr,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::Ce,
        LossKind::Ls,
        LossKind::Focal,
        LossKind::L1Norm,
        LossKind::ErConst,
        LossKind::Poly1,
        LossKind::DifficultyEr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Ls => "ls",
            LossKind::Focal => "focal",
            LossKind::L1Norm => "l1norm",
            LossKind::ErConst => "er_const",
            LossKind::Poly1 => "poly1",
            LossKind::DifficultyEr => "difficulty_er",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Global entropy-regularization strength.
    pub alpha: f64,
    pub ls_epsilon: f64,
    pub focal_gamma: f64,
    pub l1_coeff: f64,
    pub poly_epsilon: f64,
}

impl LossConfig {
    /// Conventional baseline settings with the class-count dependent `α`.
    pub fn new(kind: LossKind, num_classes: usize) -> Self {
        Self {
            kind,
            alpha: Self::default_alpha(num_classes),
            ls_epsilon: 0.1,
            focal_gamma: 3.0,
            l1_coeff: 0.01,
            poly_epsilon: 2.0,
        }
    }

    /// 0.3 up to 100 classes, 0.2 beyond.
    pub fn default_alpha(num_classes: usize) -> f64 {
        if num_classes <= 100 {
            0.3
        } else {
            0.2
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("alpha", self.alpha),
            ("ls_epsilon", self.ls_epsilon),
            ("focal_gamma", self.focal_gamma),
            ("l1_coeff", self.l1_coeff),
            ("poly_epsilon", self.poly_epsilon),
        ];
        for (name, v) in checks {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.ls_epsilon > 1.0 {
            return Err(Error::Config("ls_epsilon must not exceed 1".into()));
        }
        Ok(())
    }

    pub fn needs_weights(&self) -> bool {
        self.kind == LossKind::DifficultyEr
    }
}

/// Loss and `∂loss/∂logits` for one sample. `weight` is the difficulty
/// weight `s`; it is only read by [`LossKind::DifficultyEr`].
pub fn per_sample_loss(logits: &[f64], label: usize, weight: f64, cfg: &LossConfig) -> (f64, Vec<f64>) {
    let k = logits.len();
    let lse = log_sum_exp(logits);
    let logp: Vec<f64> = logits.iter().map(|z| z - lse).collect();
    let p: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
    let ce = -logp[label];
    // 1 − p_y without cancellation
    let miss: f64 = p.iter().enumerate().filter(|&(j, _)| j != label).map(|(_, v)| v).sum();
    let mut grad: Vec<f64> = p.clone();
    grad[label] -= 1.0;

    let entropy_bonus = |strength: f64, grad: &mut [f64]| -> f64 {
        let h = -p.iter().zip(&logp).map(|(pi, li)| pi * li).sum::<f64>();
        for j in 0..k {
            grad[j] += strength * p[j] * (logp[j] + h);
        }
        ce - strength * h
    };

    let loss = match cfg.kind {
        LossKind::Ce => ce,
        LossKind::DifficultyEr => entropy_bonus(cfg.alpha * weight, &mut grad),
        LossKind::ErConst => entropy_bonus(cfg.alpha * 1.0, &mut grad),
        LossKind::Ls => {
            let eps = cfg.ls_epsilon;
            let off = eps / k as f64;
            let mut loss = 0.0;
            for j in 0..k {
                let q = if j == label { 1.0 - eps + off } else { off };
                loss -= q * logp[j];
                grad[j] = p[j] - q;
            }
            loss
        }
        LossKind::Focal => {
            let gamma = cfg.focal_gamma;
            let py = p[label];
            let modulator = miss.powf(gamma);
            let slope = if gamma == 0.0 || miss == 0.0 {
                0.0
            } else {
                gamma * miss.powf(gamma - 1.0) * py * logp[label]
            };
            let scale = slope - modulator;
            for j in 0..k {
                let delta = if j == label { 1.0 } else { 0.0 };
                grad[j] = (delta - p[j]) * scale;
            }
            modulator * ce
        }
        LossKind::L1Norm => {
            let c = cfg.l1_coeff / k as f64;
            let mut penalty = 0.0;
            for j in 0..k {
                penalty += logits[j].abs();
                grad[j] += c * sign(logits[j]);
            }
            ce + c * penalty
        }
        LossKind::Poly1 => {
            let eps = cfg.poly_epsilon;
            let py = p[label];
            for g in grad.iter_mut() {
                *g *= 1.0 + eps * py;
            }
            ce + eps * miss
        }
    };
    (loss, grad)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// A mini-batch: row-major features, labels, and optional per-sample weights.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a [f64],
    pub labels: &'a [usize],
    pub weights: Option<&'a [f64]>,
}

/// Samples per partial sum; fixed so the reduction order never depends on
/// the thread count.
const REDUCE_CHUNK: usize = 32;

/// Batch-mean loss and its gradient with respect to every model parameter.
pub fn loss_and_grad(model: &ClassifierModel, batch: Batch<'_>, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    let d = model.input_dim();
    let n = batch.labels.len();
    if n == 0 {
        return Err(Error::Validation("empty batch".into()));
    }
    if batch.features.len() != n * d {
        return Err(Error::Validation(format!(
            "batch has {} feature values for {n} samples of width {d}",
            batch.features.len()
        )));
    }
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= model.num_classes()) {
        return Err(Error::ClassIndex {
            index: y,
            num_classes: model.num_classes(),
        });
    }
    let weights = match (cfg.needs_weights(), batch.weights) {
        (true, None) => {
            return Err(Error::Config("difficulty_er requires per-sample weights".into()));
        }
        (_, Some(w)) if w.len() != n => {
            return Err(Error::Validation(format!(
                "{} weights for a batch of {n} samples",
                w.len()
            )));
        }
        (true, Some(w)) => Some(w),
        (false, _) => None,
    };

    let partials: Vec<(f64, Vec<f64>)> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; model.params().len()];
            let mut loss = 0.0;
            for &i in chunk {
                let x = &batch.features[i * d..(i + 1) * d];
                let acts = model.forward(x);
                let w = weights.map_or(1.0, |w| w[i]);
                let (l, dz) = per_sample_loss(acts.last().unwrap(), batch.labels[i], w, cfg);
                loss += l;
                model.backward(x, &acts, dz, &mut grad);
            }
            (loss, grad)
        })
        .collect();

    let mut loss = 0.0;
    let mut grad = vec![0.0; model.params().len()];
    for (l, g) in partials {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let inv = 1.0 / n as f64;
    for g in &mut grad {
        *g *= inv;
    }
    Ok((loss * inv, grad))
}
