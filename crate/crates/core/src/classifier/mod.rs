//! Softmax classification heads over frozen embeddings.
//!
//! A [`ClassifierModel`] is a stack of affine layers with rectifiers between
//! them; the default is a single linear layer. Parameters live in one flat
//! `f64` buffer (per layer: row-major `out × in` weights, then `out` biases),
//! which keeps the optimizer and gradient checks layout-agnostic.

mod loss;
mod train;

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::io_util::{put_f64, put_u32, read_file, write_file, Reader};
use crate::rng::{stream, Domain};

pub use loss::{loss_and_grad, per_sample_loss, Batch, LossConfig, LossKind};
pub use train::{train, EpochLog, OptimConfig, TrainOutcome};

pub const MAGIC: &[u8; 4] = b"MDL1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Offsets of one affine layer inside the flat parameter buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerSpan {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: usize,
    pub bias: usize,
}

impl ClassifierModel {
    /// All-zero parameters for layer widths `[D, h_1, ..., K]`.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        if *sizes.last().unwrap() < 2 {
            return Err(Error::Config("output layer needs at least 2 classes".into()));
        }
        let count = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; count],
        })
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut model = Self::zeros(sizes)?;
        let mut rng = stream(seed, Domain::Init, 0);
        for span in model.spans() {
            let bound = 1.0 / (span.inputs as f64).sqrt();
            for w in &mut model.params[span.weights..span.bias] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        let mut model = Self::zeros(&sizes)?;
        if params.len() != model.params.len() {
            return Err(Error::Validation(format!(
                "expected {} parameters for sizes {sizes:?}, got {}",
                model.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite model parameter".into()));
        }
        model.params = params;
        Ok(model)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub(crate) fn spans(&self) -> Vec<LayerSpan> {
        let mut off = 0;
        self.sizes
            .windows(2)
            .map(|w| {
                let span = LayerSpan {
                    inputs: w[0],
                    outputs: w[1],
                    weights: off,
                    bias: off + w[0] * w[1],
                };
                off = span.bias + w[1];
                span
            })
            .collect()
    }

    /// Mask that is true for weight entries and false for biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for span in self.spans() {
            mask[span.weights..span.bias].fill(true);
        }
        mask
    }

    /// Layer outputs for one input: rectified hidden activations followed by
    /// the logits.
    pub(crate) fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let spans = self.spans();
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(spans.len());
        for (l, span) in spans.iter().enumerate() {
            let input: &[f64] = if l == 0 { x } else { &acts[l - 1] };
            let w = &self.params[span.weights..span.bias];
            let b = &self.params[span.bias..span.bias + span.outputs];
            let mut out: Vec<f64> = w
                .chunks_exact(span.inputs)
                .zip(b)
                .map(|(row, &bias)| row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + bias)
                .collect();
            if l + 1 < spans.len() {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            acts.push(out);
        }
        acts
    }

    /// Accumulate `∂L/∂θ` into `grad` given `∂L/∂logits` for one sample.
    pub(crate) fn backward(&self, x: &[f64], acts: &[Vec<f64>], dlogits: Vec<f64>, grad: &mut [f64]) {
        let spans = self.spans();
        let mut delta = dlogits;
        for l in (0..spans.len()).rev() {
            let span = spans[l];
            let input: &[f64] = if l == 0 { x } else { &acts[l - 1] };
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[span.weights + o * span.inputs..span.weights + (o + 1) * span.inputs];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
                grad[span.bias + o] += d;
            }
            if l > 0 {
                let w = &self.params[span.weights..span.bias];
                let mut prev = vec![0.0; span.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    for (p, &wv) in prev.iter_mut().zip(&w[o * span.inputs..(o + 1) * span.inputs]) {
                        *p += d * wv;
                    }
                }
                for (p, &a) in prev.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }

    /// Logits and softmax probabilities for row-major `features` (`N × D`).
    pub fn predict(&self, features: &[f64]) -> Result<Predictions> {
        let d = self.input_dim();
        if !features.len().is_multiple_of(d) {
            return Err(Error::Validation(format!(
                "feature buffer of length {} is not a multiple of model input width {d}",
                features.len()
            )));
        }
        let k = self.num_classes();
        let n = features.len() / d;
        let mut logits = Vec::with_capacity(n * k);
        let mut probs = Vec::with_capacity(n * k);
        for x in features.chunks_exact(d) {
            let z = self.forward(x).pop().unwrap();
            probs.extend(softmax(&z));
            logits.extend(z);
        }
        Ok(Predictions {
            num_classes: k,
            logits,
            probs,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.sizes.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, (self.sizes.len() - 1) as u32);
        for &s in &self.sizes {
            put_u32(&mut out, s as u32);
        }
        for &p in &self.params {
            put_f64(&mut out, p);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing MDL1 magic".into()));
        }
        let mut r = Reader::new(&bytes[4..]);
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported MDL1 version {version}")));
        }
        let layers = r.u32()? as usize;
        let sizes = (0..=layers)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let shape = Self::zeros(&sizes)?;
        let expected = 12 + 4 * sizes.len() + 8 * shape.params.len();
        if bytes.len() != expected {
            return Err(Error::Corruption {
                expected: expected as u64,
                actual: bytes.len() as u64,
            });
        }
        let params = r.f64_vec(shape.params.len())?;
        Self::from_parts(sizes, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

/// Row-major `N × K` logits and probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub num_classes: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.probs.len() / self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob_row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn logit_row(&self, i: usize) -> &[f64] {
        &self.logits[i * self.num_classes..(i + 1) * self.num_classes]
    }

    /// Arg-max class per row (lowest index on ties).
    pub fn predicted(&self) -> Vec<usize> {
        self.probs.chunks_exact(self.num_classes).map(argmax).collect()
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// `ln Σ exp(z)` with max subtraction.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Shannon entropy in nats of each row of a row-major `N × K` matrix.
pub fn entropy(probs: &[f64], num_classes: usize) -> Result<Vec<f64>> {
    if num_classes == 0 || !probs.len().is_multiple_of(num_classes) {
        return Err(Error::Validation("probability buffer does not match class count".into()));
    }
    probs
        .chunks_exact(num_classes)
        .enumerate()
        .map(|(i, row)| {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Validation(format!(
                    "row {i} is not a probability distribution (sum {sum})"
                )));
            }
            Ok(-row
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>())
        })
        .collect()
}
