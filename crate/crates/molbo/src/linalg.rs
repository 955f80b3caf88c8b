//! Shared dense linear-algebra helpers: jittered Cholesky factorization,
//! symmetric eigendecomposition with clamping, and target standardization.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix of size {n}x{n} is not positive definite even with jitter {max_jitter:e}")]
    NotPositiveDefinite { n: usize, max_jitter: f64 },
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("cannot standardize an empty target vector")]
    EmptyTargets,
}

/// Initial diagonal jitter for Cholesky factorizations.
pub const JITTER_INITIAL: f64 = 1e-8;
/// Jitter escalation cap; beyond this the matrix is reported as indefinite.
pub const JITTER_MAX: f64 = 1e-3;

/// Cholesky factorization of a symmetric matrix, adding diagonal jitter when
/// the plain factorization fails. Jitter starts at [`JITTER_INITIAL`] and
/// escalates by factors of 10 up to [`JITTER_MAX`]. Returns the factorization
/// together with the jitter that was actually applied (0 when none).
pub fn cholesky_with_jitter(
    mat: &DMatrix<f64>,
    base: f64,
    max: f64,
) -> Result<(Cholesky<f64, Dyn>, f64), LinalgError> {
    if mat.nrows() != mat.ncols() {
        return Err(LinalgError::NotSquare {
            rows: mat.nrows(),
            cols: mat.ncols(),
        });
    }
    let n = mat.nrows();
    if let Some(chol) = Cholesky::new(mat.clone()) {
        return Ok((chol, 0.0));
    }
    let mut jitter = base;
    while jitter <= max * (1.0 + 1e-12) {
        let mut jittered = mat.clone();
        for i in 0..n {
            jittered[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(jittered) {
            return Ok((chol, jitter));
        }
        jitter *= 10.0;
    }
    Err(LinalgError::NotPositiveDefinite { n, max_jitter: max })
}

/// Convenience wrapper with the default jitter schedule.
pub fn cholesky_default(mat: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64), LinalgError> {
    cholesky_with_jitter(mat, JITTER_INITIAL, JITTER_MAX)
}

/// Log-determinant from a Cholesky factor: 2 * sum(log diag(L)).
pub fn cholesky_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Symmetric eigendecomposition with eigenvalues clamped at `floor` (use 0.0
/// to project onto the PSD cone). Returns (eigenvalues, eigenvectors-as-columns).
pub fn symmetric_eigen_clamped(mat: &DMatrix<f64>, floor: f64) -> (DVector<f64>, DMatrix<f64>) {
    let eig = mat.clone().symmetric_eigen();
    let values = eig.eigenvalues.map(|v| v.max(floor));
    (values, eig.eigenvectors)
}

/// Affine map between raw targets and zero-mean/unit-variance internal
/// targets. With fewer than two observations, or constant targets, the scale
/// falls back to 1 so the transform stays invertible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    /// Identity transform.
    pub fn identity() -> Self {
        Standardizer {
            mean: 0.0,
            std: 1.0,
        }
    }

    /// Fit mean and standard deviation (population norm, 1/n) to `values`.
    pub fn fit(values: &DVector<f64>) -> Result<Self, LinalgError> {
        if values.is_empty() {
            return Err(LinalgError::EmptyTargets);
        }
        let n = values.len() as f64;
        let mean = values.sum() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(Standardizer { mean, std })
    }

    pub fn encode(&self, value: f64) -> f64 {
        (value - self.mean) / self.std
    }

    pub fn encode_vec(&self, values: &DVector<f64>) -> DVector<f64> {
        values.map(|v| self.encode(v))
    }

    pub fn decode_mean(&self, value: f64) -> f64 {
        value * self.std + self.mean
    }

    /// Variances scale by the square of the standard deviation.
    pub fn decode_variance(&self, variance: f64) -> f64 {
        variance * self.std * self.std
    }
}

/// Squared Euclidean distances between rows of `a` and rows of `b`.
pub fn rowwise_sq_dists(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), b.nrows());
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            let mut acc = 0.0;
            for k in 0..a.ncols() {
                let d = a[(i, k)] - b[(j, k)];
                acc += d * d;
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// Median of the non-zero pairwise Euclidean distances between rows; falls
/// back to 1.0 when every pair coincides (or there are fewer than two rows).
/// Used as a data-driven initial lengthscale.
pub fn median_pairwise_distance(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let mut dists = Vec::with_capacity(n.saturating_sub(1) * n / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for k in 0..x.ncols() {
                let d = x[(i, k)] - x[(j, k)];
                acc += d * d;
            }
            let d = acc.sqrt();
            if d > 0.0 {
                dists.push(d);
            }
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    dists[dists.len() / 2]
}
