//! Class-conditional (shared covariance) and class-agnostic Gaussian models
//! over embedding features, and squared Mahalanobis distances under them.
//!
//! Covariances use the maximum-likelihood denominator `N` and are shrunk
//! toward a scaled identity, `Σ + λ·(tr Σ / D)·I`, before Cholesky
//! factorization. Distances are returned as nonnegative squared distances
//! computed by a forward triangular solve against the stored factor.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::embedding_store::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::io_util::{put_f64, put_u32, put_u64, read_file, write_file, Reader};

pub const DEFAULT_SHRINKAGE: f64 = 1e-4;
pub const MAGIC: &[u8; 4] = b"GBK1";
pub const VERSION: u32 = 1;

/// Rows per block when accumulating scatter matrices.
const SCATTER_BLOCK: usize = 2048;

/// Relative pivot floor below which a factor is treated as singular.
const PIVOT_TOL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBank {
    class_means: DMatrix<f64>,
    pooled_chol: DMatrix<f64>,
    agn_mean: DVector<f64>,
    agn_chol: DMatrix<f64>,
    shrinkage: f64,
    class_counts: Vec<u64>,
}

/// Per-class sample means as a `K×D` matrix.
pub fn class_means(ds: &EmbeddingDataset) -> Result<DMatrix<f64>> {
    let (k, d) = (ds.num_classes(), ds.dim());
    let counts = ds.class_counts();
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class });
    }
    let mut sums = DMatrix::<f64>::zeros(k, d);
    for i in 0..ds.len() {
        let y = ds.label(i);
        for (j, &v) in ds.row(i).iter().enumerate() {
            sums[(y, j)] += v as f64;
        }
    }
    for (y, &c) in counts.iter().enumerate() {
        let inv = 1.0 / c as f64;
        for j in 0..d {
            sums[(y, j)] *= inv;
        }
    }
    Ok(sums)
}

pub fn agnostic_mean(ds: &EmbeddingDataset) -> DVector<f64> {
    let d = ds.dim();
    let mut sum = DVector::<f64>::zeros(d);
    for i in 0..ds.len() {
        for (j, &v) in ds.row(i).iter().enumerate() {
            sum[j] += v as f64;
        }
    }
    sum / ds.len() as f64
}

/// `Σ_i (x_i − c(i))(x_i − c(i))ᵀ` over the selected rows, where `c(i)` is the
/// centre assigned to row `i`. Accumulated blockwise as `XᵀX`.
fn scatter<'a>(
    ds: &EmbeddingDataset,
    rows: impl Iterator<Item = usize>,
    centre: impl Fn(usize) -> nalgebra::DVectorView<'a, f64>,
) -> DMatrix<f64> {
    let d = ds.dim();
    let mut acc = DMatrix::<f64>::zeros(d, d);
    let rows: Vec<usize> = rows.collect();
    for block in rows.chunks(SCATTER_BLOCK) {
        let mut x = DMatrix::<f64>::zeros(block.len(), d);
        for (r, &i) in block.iter().enumerate() {
            let c = centre(i);
            for (j, &v) in ds.row(i).iter().enumerate() {
                x[(r, j)] = v as f64 - c[j];
            }
        }
        acc += x.tr_mul(&x);
    }
    // symmetrize away rounding asymmetry from the blocked product
    let t = acc.transpose();
    (acc + t) * 0.5
}

/// Unshrunk pooled within-class covariance, `(1/N) Σ_k Σ_{y_i=k} (x_i−μ_k)(x_i−μ_k)ᵀ`.
pub fn pooled_covariance(ds: &EmbeddingDataset) -> Result<DMatrix<f64>> {
    let means = class_means(ds)?;
    let means_t = means.transpose();
    let s = scatter(ds, 0..ds.len(), |i| means_t.column(ds.label(i)));
    Ok(s / ds.len() as f64)
}

/// Unshrunk covariance of a single class, normalized by `N_k`.
pub fn class_covariance(ds: &EmbeddingDataset, class: usize) -> Result<DMatrix<f64>> {
    if class >= ds.num_classes() {
        return Err(Error::ClassIndex {
            index: class,
            num_classes: ds.num_classes(),
        });
    }
    let means = class_means(ds)?;
    let means_t = means.transpose();
    let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i) == class).collect();
    let n_k = rows.len();
    let s = scatter(ds, rows.into_iter(), |_| means_t.column(class));
    Ok(s / n_k as f64)
}

/// Unshrunk covariance of all features around the global mean.
pub fn agnostic_covariance(ds: &EmbeddingDataset) -> DMatrix<f64> {
    let mean = agnostic_mean(ds);
    let s = scatter(ds, 0..ds.len(), |_| mean.column(0));
    s / ds.len() as f64
}

/// `Σ + λ·(tr Σ / D)·I`. A zero-trace covariance is shrunk toward `λ·I`.
pub fn shrink(cov: &DMatrix<f64>, shrinkage: f64) -> DMatrix<f64> {
    let d = cov.nrows();
    let trace = cov.trace();
    let scale = if trace > 0.0 { trace / d as f64 } else { 1.0 };
    let mut out = cov.clone();
    for j in 0..d {
        out[(j, j)] += shrinkage * scale;
    }
    out
}

fn factor(cov: DMatrix<f64>, which: &'static str, shrinkage: f64) -> Result<DMatrix<f64>> {
    let max_diag = cov.diagonal().iter().cloned().fold(0.0_f64, f64::max);
    let chol = Cholesky::new(cov).ok_or(Error::Singular { which, shrinkage })?;
    let l = chol.unpack();
    let floor = PIVOT_TOL * max_diag.max(f64::MIN_POSITIVE);
    if l.diagonal().iter().any(|&p| !(p * p > floor)) {
        return Err(Error::Singular { which, shrinkage });
    }
    Ok(l)
}

/// Row-major dump.
fn put_matrix(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            put_f64(out, m[(r, c)]);
        }
    }
}

/// Squared norm of `L⁻¹ v`.
fn solve_sq_norm(l: &DMatrix<f64>, mut v: DVector<f64>) -> f64 {
    let d = v.len();
    for i in 0..d {
        let mut s = v[i];
        for j in 0..i {
            s -= l[(i, j)] * v[j];
        }
        v[i] = s / l[(i, i)];
    }
    v.norm_squared()
}

impl GaussianBank {
    /// Fit per-class means, the shrunk pooled covariance, and the shrunk
    /// class-agnostic Gaussian.
    pub fn fit(ds: &EmbeddingDataset, shrinkage: f64) -> Result<Self> {
        if !(shrinkage >= 0.0) || !shrinkage.is_finite() {
            return Err(Error::Validation(format!(
                "shrinkage must be finite and nonnegative, got {shrinkage}"
            )));
        }
        let class_means = class_means(ds)?;
        let pooled = pooled_covariance(ds)?;
        let agn_mean = agnostic_mean(ds);
        let agn = agnostic_covariance(ds);
        let pooled_chol = factor(shrink(&pooled, shrinkage), "pooled", shrinkage)?;
        let agn_chol = factor(shrink(&agn, shrinkage), "class-agnostic", shrinkage)?;
        Ok(Self {
            class_means,
            pooled_chol,
            agn_mean,
            agn_chol,
            shrinkage,
            class_counts: ds.class_counts().into_iter().map(|c| c as u64).collect(),
        })
    }

    /// Bank from explicit moments. Covariances are factored as given, with
    /// no shrinkage applied.
    pub fn from_moments(
        class_means: DMatrix<f64>,
        pooled_cov: DMatrix<f64>,
        agn_mean: DVector<f64>,
        agn_cov: DMatrix<f64>,
        class_counts: Vec<u64>,
    ) -> Result<Self> {
        let d = class_means.ncols();
        let square = |m: &DMatrix<f64>| m.nrows() == d && m.ncols() == d;
        if d == 0 || !square(&pooled_cov) || !square(&agn_cov) || agn_mean.len() != d {
            return Err(Error::Validation("moment shapes disagree".into()));
        }
        if class_counts.len() != class_means.nrows() {
            return Err(Error::Validation(format!(
                "{} class counts for {} class means",
                class_counts.len(),
                class_means.nrows()
            )));
        }
        let bank = Self {
            class_means,
            pooled_chol: factor(pooled_cov, "pooled", 0.0)?,
            agn_mean,
            agn_chol: factor(agn_cov, "class-agnostic", 0.0)?,
            shrinkage: 0.0,
            class_counts,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn num_classes(&self) -> usize {
        self.class_means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.class_means.ncols()
    }

    pub fn shrinkage(&self) -> f64 {
        self.shrinkage
    }

    pub fn class_counts(&self) -> &[u64] {
        &self.class_counts
    }

    pub fn class_mean(&self, k: usize) -> Vec<f64> {
        self.class_means.row(k).iter().copied().collect()
    }

    pub fn agnostic_mean(&self) -> &[f64] {
        self.agn_mean.as_slice()
    }

    pub fn pooled_chol(&self) -> &DMatrix<f64> {
        &self.pooled_chol
    }

    pub fn agnostic_chol(&self) -> &DMatrix<f64> {
        &self.agn_chol
    }

    /// Shrunk pooled covariance reconstructed from its factor.
    pub fn pooled_cov(&self) -> DMatrix<f64> {
        &self.pooled_chol * self.pooled_chol.transpose()
    }

    pub fn agnostic_cov(&self) -> DMatrix<f64> {
        &self.agn_chol * self.agn_chol.transpose()
    }

    fn check_feature(&self, feature: &[f64]) -> Result<()> {
        if feature.len() != self.dim() {
            return Err(Error::Validation(format!(
                "feature has width {}, bank expects {}",
                feature.len(),
                self.dim()
            )));
        }
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("feature contains non-finite values".into()));
        }
        Ok(())
    }

    /// `(f − μ_k)ᵀ Σ⁻¹ (f − μ_k)`.
    pub fn mahalanobis_class(&self, feature: &[f64], k: usize) -> Result<f64> {
        if k >= self.num_classes() {
            return Err(Error::ClassIndex {
                index: k,
                num_classes: self.num_classes(),
            });
        }
        self.check_feature(feature)?;
        let diff = DVector::from_iterator(
            self.dim(),
            feature
                .iter()
                .zip(self.class_means.row(k).iter())
                .map(|(f, m)| f - m),
        );
        Ok(solve_sq_norm(&self.pooled_chol, diff))
    }

    /// `(f − μ_agn)ᵀ Σ_agn⁻¹ (f − μ_agn)`.
    pub fn mahalanobis_agnostic(&self, feature: &[f64]) -> Result<f64> {
        self.check_feature(feature)?;
        let diff = DVector::from_iterator(
            self.dim(),
            feature.iter().zip(self.agn_mean.iter()).map(|(f, m)| f - m),
        );
        Ok(solve_sq_norm(&self.agn_chol, diff))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (k, d) = (self.num_classes(), self.dim());
        let mut out = Vec::with_capacity(28 + 8 * (k * d + 2 * d * d + d + k));
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, k as u32);
        put_u32(&mut out, d as u32);
        put_f64(&mut out, self.shrinkage);
        put_matrix(&mut out, &self.class_means);
        put_matrix(&mut out, &self.pooled_chol);
        for &v in self.agn_mean.iter() {
            put_f64(&mut out, v);
        }
        put_matrix(&mut out, &self.agn_chol);
        for &n in &self.class_counts {
            put_u64(&mut out, n);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing GBK1 magic".into()));
        }
        let mut r = Reader::new(&bytes[4..]);
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported GBK1 version {version}")));
        }
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        let shrinkage = r.f64()?;
        let expected = 24 + 8 * (k * d + 2 * d * d + d + k);
        if bytes.len() != expected {
            return Err(Error::Corruption {
                expected: expected as u64,
                actual: bytes.len() as u64,
            });
        }
        let class_means = DMatrix::from_row_slice(k, d, &r.f64_vec(k * d)?);
        let pooled_chol = DMatrix::from_row_slice(d, d, &r.f64_vec(d * d)?);
        let agn_mean = DVector::from_vec(r.f64_vec(d)?);
        let agn_chol = DMatrix::from_row_slice(d, d, &r.f64_vec(d * d)?);
        let class_counts = (0..k).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let bank = Self {
            class_means,
            pooled_chol,
            agn_mean,
            agn_chol,
            shrinkage,
            class_counts,
        };
        bank.validate()?;
        Ok(bank)
    }

    fn validate(&self) -> Result<()> {
        let diag_ok = |m: &DMatrix<f64>| m.diagonal().iter().all(|&v| v > 0.0 && v.is_finite());
        if !diag_ok(&self.pooled_chol) || !diag_ok(&self.agn_chol) {
            return Err(Error::Validation(
                "Cholesky factor has a non-positive diagonal".into(),
            ));
        }
        if self.class_counts.contains(&0) {
            return Err(Error::Validation("bank has an empty class".into()));
        }
        if self.class_means.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite class mean".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

pub fn fit_gaussian_bank(ds: &EmbeddingDataset, shrinkage: f64) -> Result<GaussianBank> {
    GaussianBank::fit(ds, shrinkage)
}
