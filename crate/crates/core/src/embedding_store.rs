//! Embedding datasets: the `EMB1` binary format and CSV import/export.
//!
//! `EMB1` layout (all little-endian):
//!
//! | bytes        | field                                  |
//! |--------------|----------------------------------------|
//! | 4            | magic `b"EMB1"` (`0x454D4231` big-endian) |
//! | 4            | `u32` version = 1                      |
//! | 8            | `u64` N                                |
//! | 4            | `u32` D                                |
//! | 4            | `u32` K                                |
//! | N·D·4        | `f32` features, row-major              |
//! | N·4          | `u32` labels                           |
//! | N·8          | `u64` ids                              |

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{put_u32, put_u64, read_file, write_file, Reader};

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

/// Feature vectors with class labels and stable sample ids.
///
/// Always valid once constructed: rows finite, labels `< K`, ids unique,
/// `N ≥ 1`, `D ≥ 1`, `K ≥ 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    features: Vec<f32>,
    labels: Vec<u32>,
    ids: Vec<u64>,
    dim: usize,
    num_classes: usize,
}

impl EmbeddingDataset {
    pub fn new(
        features: Vec<f32>,
        dim: usize,
        labels: Vec<u32>,
        ids: Vec<u64>,
        num_classes: usize,
    ) -> Result<Self> {
        let ds = Self {
            features,
            labels,
            ids,
            dim,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if n == 0 {
            return Err(Error::Validation("dataset must contain at least one sample".into()));
        }
        if self.dim == 0 {
            return Err(Error::Validation("feature dimension must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.ids.len() != n || self.features.len() != n * self.dim {
            return Err(Error::Validation(format!(
                "length mismatch: {} labels, {} ids, {} feature values for D={}",
                n,
                self.ids.len(),
                self.features.len(),
                self.dim
            )));
        }
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite feature in row {} (column {})",
                i / self.dim,
                i % self.dim
            )));
        }
        if let Some((i, &y)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &y)| y as usize >= self.num_classes)
        {
            return Err(Error::Validation(format!(
                "label {y} in row {i} is not below K={}",
                self.num_classes
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for &id in &self.ids {
            if !seen.insert(id) {
                return Err(Error::Validation(format!("duplicate sample id {id}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Row `i` promoted to `f64`.
    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    /// All features promoted to `f64`, row-major.
    pub fn features_f64(&self) -> Vec<f64> {
        self.features.iter().map(|&v| v as f64).collect()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y as usize] += 1;
        }
        counts
    }

    /// New dataset with the rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Validation(format!(
                    "row index {i} out of range for {} rows",
                    self.len()
                )));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
            ids.push(self.ids[i]);
        }
        Self::new(features, self.dim, labels, ids, self.num_classes)
    }

    /// Same ids and labels with replaced features.
    pub fn with_features(&self, features: Vec<f32>) -> Result<Self> {
        Self::new(
            features,
            self.dim,
            self.labels.clone(),
            self.ids.clone(),
            self.num_classes,
        )
    }

    /// Same ids and features with replaced labels.
    pub fn with_labels(&self, labels: Vec<u32>) -> Result<Self> {
        Self::new(
            self.features.clone(),
            self.dim,
            labels,
            self.ids.clone(),
            self.num_classes,
        )
    }

    /// Same rows under a different class count (labels must stay below it).
    pub fn with_num_classes(&self, num_classes: usize) -> Result<Self> {
        Self::new(
            self.features.clone(),
            self.dim,
            self.labels.clone(),
            self.ids.clone(),
            num_classes,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(expected_file_len(n, self.dim));
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, n as u64);
        put_u32(&mut out, self.dim as u32);
        put_u32(&mut out, self.num_classes as u32);
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &y in &self.labels {
            put_u32(&mut out, y);
        }
        for &id in &self.ids {
            put_u64(&mut out, id);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing EMB1 magic".into()));
        }
        let mut r = Reader::new(&bytes[4..]);
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported EMB1 version {version}")));
        }
        let n = r.u64()? as usize;
        let dim = r.u32()? as usize;
        let k = r.u32()? as usize;
        let expected = n
            .checked_mul(dim)
            .and_then(|nd| nd.checked_mul(4))
            .and_then(|b| b.checked_add(n * 12 + HEADER_LEN))
            .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::Corruption {
                expected: expected as u64,
                actual: bytes.len() as u64,
            });
        }
        let feat_bytes = r.take(n * dim * 4)?;
        let features = feat_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        Self::new(features, dim, labels, ids, k)
    }

    /// CSV rows `id,label,f_0,...,f_{D-1}` with shortest round-trip floats.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.len() {
            write!(out, "{},{}", self.ids[i], self.labels[i]).unwrap();
            for v in self.row(i) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

pub fn expected_file_len(n: usize, dim: usize) -> usize {
    HEADER_LEN + n * dim * 4 + n * 4 + n * 8
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    EmbeddingDataset::from_bytes(&read_file(path.as_ref())?)
}

pub fn save_dataset(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &ds.to_bytes())
}

/// Parse `id,label,f_0,...` rows. Blank lines are skipped; row numbers in
/// errors are 1-based line numbers.
pub fn parse_csv(text: &str, num_classes: usize) -> Result<EmbeddingDataset> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        let row = lineno + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(Error::Format(format!(
                "row {row}: expected id,label and at least one feature"
            )));
        }
        let d = fields.len() - 2;
        match dim {
            None => dim = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::Format(format!(
                    "row {row}: ragged row with {d} features, expected {prev}"
                )))
            }
            _ => {}
        }
        let id = fields[0].parse::<u64>().map_err(|e| Error::Parse {
            row,
            message: format!("bad id {:?}: {e}", fields[0]),
        })?;
        let label = fields[1].parse::<u32>().map_err(|e| Error::Parse {
            row,
            message: format!("bad label {:?}: {e}", fields[1]),
        })?;
        for (j, f) in fields[2..].iter().enumerate() {
            let v = f.parse::<f32>().map_err(|e| Error::Parse {
                row,
                message: format!("bad feature {j} {f:?}: {e}"),
            })?;
            features.push(v);
        }
        ids.push(id);
        labels.push(label);
    }
    let dim = dim.ok_or_else(|| Error::Validation("CSV contains no rows".into()))?;
    EmbeddingDataset::new(features, dim, labels, ids, num_classes)
}

pub fn import_csv(path: impl AsRef<Path>, num_classes: usize) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, num_classes)
}
