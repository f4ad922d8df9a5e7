use rand::seq::SliceRandom;
use serde::Serialize;

use super::loss::{loss_and_grad, Batch, LossConfig};
use super::ClassifierModel;
use crate::difficulty::DifficultyScores;
use crate::embedding_store::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::metrics;
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    /// Multiply the learning rate by `lr_decay` every `lr_step_epochs`
    /// epochs; 0 disables the schedule.
    pub lr_step_epochs: usize,
    pub lr_decay: f64,
    pub momentum: f64,
    /// L2 coefficient added to weight gradients (biases are not decayed).
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Hidden layer widths of the head; empty for a linear head.
    pub hidden: Vec<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            lr_step_epochs: 0,
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 30,
            seed: 0,
            hidden: Vec::new(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::Config("lr decay factor must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layers must be non-empty".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if self.lr_step_epochs == 0 {
            self.learning_rate
        } else {
            self.learning_rate * self.lr_decay.powi((epoch / self.lr_step_epochs) as i32)
        }
    }

    pub fn layer_sizes(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut sizes = vec![input];
        sizes.extend(&self.hidden);
        sizes.push(classes);
        sizes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
    pub val_ece: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ClassifierModel,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    /// `epoch,train_loss,val_acc,val_ece`; validation columns are empty
    /// when no validation split was given.
    pub fn log_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        let mut out = String::from("epoch,train_loss,val_acc,val_ece\n");
        for e in &self.log {
            out.push_str(&format!(
                "{},{:.16e},{},{}\n",
                e.epoch,
                e.train_loss,
                opt(e.val_acc),
                opt(e.val_ece)
            ));
        }
        out
    }
}

/// Mini-batch SGD with momentum on `ds`.
///
/// Difficulty weights are looked up by sample id once, before the first
/// epoch, and stay fixed. Shuffling draws only from `ocfg.seed`, so equal
/// inputs give bit-identical models.
pub fn train(
    ds: &EmbeddingDataset,
    scores: Option<&DifficultyScores>,
    lcfg: &LossConfig,
    ocfg: &OptimConfig,
    validation: Option<&EmbeddingDataset>,
) -> Result<TrainOutcome> {
    lcfg.validate()?;
    ocfg.validate()?;
    let weights = match (lcfg.needs_weights(), scores) {
        (true, None) => {
            return Err(Error::Config(format!("{} requires difficulty scores", lcfg.kind)));
        }
        (true, Some(s)) => Some(s.weights_for(ds.ids())?),
        (false, _) => None,
    };
    if let Some(v) = validation {
        if v.dim() != ds.dim() {
            return Err(Error::Validation("validation split has a different feature width".into()));
        }
    }

    let d = ds.dim();
    let sizes = ocfg.layer_sizes(d, ds.num_classes());
    let mut model = ClassifierModel::init(&sizes, ocfg.seed)?;
    let decay_mask = model.weight_mask();
    let mut velocity = vec![0.0; model.params().len()];
    let features = ds.features_f64();
    let labels: Vec<usize> = ds.labels().iter().map(|&y| y as usize).collect();
    let val_features = validation.map(|v| v.features_f64());

    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut log = Vec::with_capacity(ocfg.epochs);
    let mut bx = Vec::with_capacity(ocfg.batch_size * d);
    let mut by = Vec::with_capacity(ocfg.batch_size);
    let mut bw = Vec::with_capacity(ocfg.batch_size);

    for epoch in 0..ocfg.epochs {
        let lr = ocfg.learning_rate_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut stream(ocfg.seed, Domain::Shuffle, epoch as u64));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(ocfg.batch_size) {
            bx.clear();
            by.clear();
            bw.clear();
            for &i in chunk {
                bx.extend_from_slice(&features[i * d..(i + 1) * d]);
                by.push(labels[i]);
                if let Some(w) = &weights {
                    bw.push(w[i]);
                }
            }
            let batch = Batch {
                features: &bx,
                labels: &by,
                weights: weights.as_ref().map(|_| bw.as_slice()),
            };
            let (loss, grad) = loss_and_grad(&model, batch, lcfg)?;
            loss_sum += loss * chunk.len() as f64;
            let params = model.params_mut();
            for j in 0..params.len() {
                let mut g = grad[j];
                if decay_mask[j] {
                    g += ocfg.weight_decay * params[j];
                }
                velocity[j] = ocfg.momentum * velocity[j] + g;
                params[j] -= lr * velocity[j];
            }
        }
        if model.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "training diverged at epoch {epoch}; lower the learning rate"
            )));
        }
        let (val_acc, val_ece) = match (validation, &val_features) {
            (Some(v), Some(vf)) => {
                let pred = model.predict(vf)?;
                let labels: Vec<usize> = v.labels().iter().map(|&y| y as usize).collect();
                let acc = metrics::accuracy(&pred.probs, &labels, pred.num_classes)?;
                let bins = metrics::DEFAULT_BINS.min(v.len());
                let ece = metrics::ece(&pred.probs, &labels, pred.num_classes, bins)?.ece;
                (Some(acc), Some(ece))
            }
            _ => (None, None),
        };
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / ds.len() as f64,
            val_acc,
            val_ece,
        });
    }
    Ok(TrainOutcome { model, log })
}
