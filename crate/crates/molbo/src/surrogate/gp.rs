//! Exact Gaussian-process regression with Tanimoto or Matérn-5/2 kernels.
//!
//! The Tanimoto kernel applies to binary fingerprints, k(a, b) =
//! outputscale * |a AND b| / |a OR b|; the Matérn-5/2 kernel applies to dense
//! feature vectors with a single isotropic lengthscale,
//! k(r) = outputscale * (1 + sqrt5 r + 5 r^2 / 3) exp(-sqrt5 r) with
//! r = ||x - x'|| / lengthscale. Hyperparameters (outputscale, lengthscale,
//! observation noise) are fitted by maximizing the log marginal likelihood
//!
//!   L = -1/2 y^T (K + s2 I)^-1 y - 1/2 log|K + s2 I| - n/2 log 2pi
//!
//! with Adam on the log-parameters and analytic gradients
//! dL/dt = 1/2 tr((aa^T - (K + s2 I)^-1) dK/dt), a = (K + s2 I)^-1 y.
//! The best iterate (including the initialization) wins, so fitting never
//! worsens the marginal likelihood. Targets are standardized internally by
//! default and predictions are mapped back to the original scale.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::chem::{tanimoto, Fingerprint};
use crate::linalg::{
    cholesky_log_det, cholesky_with_jitter, median_pairwise_distance, rowwise_sq_dists,
    Standardizer, JITTER_INITIAL, JITTER_MAX,
};
use crate::opt::{Adam, AdamConfig};

use super::{PosteriorPredictive, SurrogateError};

const SQRT5: f64 = 2.23606797749979;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Tanimoto,
    Matern52,
}

/// GP inputs: binary fingerprints for the Tanimoto kernel, dense feature
/// rows for Matérn-5/2.
#[derive(Debug, Clone)]
pub enum GpInputs {
    Fingerprints(Vec<Fingerprint>),
    Dense(DMatrix<f64>),
}

impl GpInputs {
    pub fn len(&self) -> usize {
        match self {
            GpInputs::Fingerprints(f) => f.len(),
            GpInputs::Dense(m) => m.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn kind_matches(&self, kernel: KernelKind) -> bool {
        matches!(
            (self, kernel),
            (GpInputs::Fingerprints(_), KernelKind::Tanimoto)
                | (GpInputs::Dense(_), KernelKind::Matern52)
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GpConfig {
    pub kernel: KernelKind,
    /// Standardize targets to zero mean / unit variance during fitting.
    pub standardize: bool,
    /// Adam steps for hyperparameter fitting.
    pub fit_steps: u64,
    /// Adam learning rate on log-hyperparameters.
    pub fit_lr: f64,
}

impl GpConfig {
    pub fn new(kernel: KernelKind) -> Self {
        GpConfig {
            kernel,
            standardize: true,
            fit_steps: 500,
            fit_lr: 0.01,
        }
    }
}

/// Kernel hyperparameters in natural scale. `lengthscale` is ignored by the
/// Tanimoto kernel.
#[derive(Debug, Clone, Copy)]
pub struct GpHypers {
    pub outputscale: f64,
    pub lengthscale: f64,
    pub noise: f64,
}

/// Hyperparameter-independent kernel precomputation: the Tanimoto base
/// matrix, or squared distances for Matérn.
enum Prepared {
    Tanimoto(DMatrix<f64>),
    Matern(DMatrix<f64>),
}

fn tanimoto_base(a: &[Fingerprint], b: &[Fingerprint]) -> Result<DMatrix<f64>, SurrogateError> {
    let mut out = DMatrix::zeros(a.len(), b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[(i, j)] = tanimoto(&a[i], &b[j])
                .map_err(|e| SurrogateError::Invalid(e.to_string()))?;
        }
    }
    Ok(out)
}

/// Matérn-5/2 profile from squared distances and a lengthscale.
fn matern_profile(sq_dists: &DMatrix<f64>, lengthscale: f64) -> DMatrix<f64> {
    sq_dists.map(|d2| {
        let r = d2.max(0.0).sqrt() / lengthscale;
        (1.0 + SQRT5 * r + 5.0 * r * r / 3.0) * (-SQRT5 * r).exp()
    })
}

/// d(profile)/d(log lengthscale), elementwise: (5/3) r^2 (1 + sqrt5 r) e^{-sqrt5 r}.
fn matern_profile_dlogl(sq_dists: &DMatrix<f64>, lengthscale: f64) -> DMatrix<f64> {
    sq_dists.map(|d2| {
        let r = d2.max(0.0).sqrt() / lengthscale;
        (5.0 / 3.0) * r * r * (1.0 + SQRT5 * r) * (-SQRT5 * r).exp()
    })
}

/// Kernel matrix between two input sets under the given hyperparameters.
/// Exposed for oracle tests and diagnostics.
pub fn kernel_matrix(
    kernel: KernelKind,
    hypers: &GpHypers,
    a: &GpInputs,
    b: &GpInputs,
) -> Result<DMatrix<f64>, SurrogateError> {
    match (kernel, a, b) {
        (KernelKind::Tanimoto, GpInputs::Fingerprints(fa), GpInputs::Fingerprints(fb)) => {
            Ok(tanimoto_base(fa, fb)? * hypers.outputscale)
        }
        (KernelKind::Matern52, GpInputs::Dense(xa), GpInputs::Dense(xb)) => {
            if xa.ncols() != xb.ncols() {
                return Err(SurrogateError::DimensionMismatch {
                    expected: xa.ncols(),
                    found: xb.ncols(),
                });
            }
            let d2 = rowwise_sq_dists(xa, xb);
            Ok(matern_profile(&d2, hypers.lengthscale) * hypers.outputscale)
        }
        _ => Err(SurrogateError::Invalid(
            "kernel kind does not match input representation".to_string(),
        )),
    }
}

/// Log marginal likelihood and its gradient with respect to the log
/// hyperparameters, evaluated at the given natural-scale hyperparameters and
/// raw targets (no standardization is applied). Exposed for oracle tests and
/// diagnostics. The gradient layout follows [`GpHypers`]: (outputscale,
/// noise) for Tanimoto and (outputscale, lengthscale, noise) for Matérn-5/2.
pub fn lml_with_gradient(
    kernel: KernelKind,
    hypers: &GpHypers,
    inputs: &GpInputs,
    y: &DVector<f64>,
) -> Result<(f64, Vec<f64>), SurrogateError> {
    if inputs.is_empty() {
        return Err(SurrogateError::NoTrainingData);
    }
    if inputs.len() != y.len() {
        return Err(SurrogateError::RowMismatch {
            inputs: inputs.len(),
            targets: y.len(),
        });
    }
    if !inputs.kind_matches(kernel) {
        return Err(SurrogateError::Invalid(
            "kernel kind does not match input representation".to_string(),
        ));
    }
    let prepared = GpModel::prepare(inputs)?;
    let params = pack_params(kernel, hypers);
    let eval = lml_and_grad(&prepared, kernel, &params, y)?;
    Ok((eval.value, eval.grad.iter().copied().collect()))
}

/// Log-parameter vector layout. Tanimoto has no lengthscale entry.
fn pack_params(kernel: KernelKind, h: &GpHypers) -> DVector<f64> {
    match kernel {
        KernelKind::Tanimoto => DVector::from_row_slice(&[h.outputscale.ln(), h.noise.ln()]),
        KernelKind::Matern52 => {
            DVector::from_row_slice(&[h.outputscale.ln(), h.lengthscale.ln(), h.noise.ln()])
        }
    }
}

fn unpack_params(kernel: KernelKind, p: &DVector<f64>) -> GpHypers {
    match kernel {
        KernelKind::Tanimoto => GpHypers {
            outputscale: p[0].exp(),
            lengthscale: 1.0,
            noise: p[1].exp(),
        },
        KernelKind::Matern52 => GpHypers {
            outputscale: p[0].exp(),
            lengthscale: p[1].exp(),
            noise: p[2].exp(),
        },
    }
}

struct LmlEval {
    value: f64,
    grad: DVector<f64>,
}

/// Log marginal likelihood and its gradient with respect to the
/// log-hyperparameters, at standardized targets `y`.
fn lml_and_grad(
    prepared: &Prepared,
    kernel: KernelKind,
    params: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<LmlEval, SurrogateError> {
    let h = unpack_params(kernel, params);
    let n = y.len();

    let (base, dlogl) = match prepared {
        Prepared::Tanimoto(b) => (b.clone(), None),
        Prepared::Matern(d2) => (
            matern_profile(d2, h.lengthscale),
            Some(matern_profile_dlogl(d2, h.lengthscale)),
        ),
    };
    let k = &base * h.outputscale;
    let mut k_y = k.clone();
    for i in 0..n {
        k_y[(i, i)] += h.noise;
    }
    let (chol, _) = cholesky_with_jitter(&k_y, JITTER_INITIAL, JITTER_MAX)?;
    let alpha = chol.solve(y);
    let value = -0.5 * y.dot(&alpha)
        - 0.5 * cholesky_log_det(&chol)
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // W = alpha alpha^T - K_y^-1; dL/dt = 1/2 sum(W o dK/dt).
    let k_inv = chol.inverse();
    let w = &alpha * alpha.transpose() - k_inv;

    let half_dot = |dk: &DMatrix<f64>| 0.5 * w.zip_fold(dk, 0.0, |acc, wij, dij| acc + wij * dij);

    let grad = match kernel {
        KernelKind::Tanimoto => {
            let g_os = half_dot(&k); // dK/dlog os = K
            let g_noise = 0.5 * h.noise * w.trace(); // dK/dlog s2 = s2 I
            DVector::from_row_slice(&[g_os, g_noise])
        }
        KernelKind::Matern52 => {
            let g_os = half_dot(&k);
            let g_l = half_dot(&(dlogl.expect("matern gradient") * h.outputscale));
            let g_noise = 0.5 * h.noise * w.trace();
            DVector::from_row_slice(&[g_os, g_l, g_noise])
        }
    };
    Ok(LmlEval { value, grad })
}

/// A fitted Gaussian-process model for one output.
pub struct GpModel {
    kernel: KernelKind,
    hypers: GpHypers,
    inputs: GpInputs,
    y_std: DVector<f64>,
    standardizer: Standardizer,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    /// Diagonal jitter the final factorization needed (0 when none).
    pub jitter: f64,
    /// Log marginal likelihood at the fitted hyperparameters (standardized
    /// target space).
    pub lml: f64,
}

impl GpModel {
    /// Fit hyperparameters by Adam ascent on the log marginal likelihood,
    /// starting from data-driven defaults: outputscale = target variance,
    /// lengthscale = median pairwise distance, noise = 1e-2 * target
    /// variance.
    pub fn fit(
        inputs: GpInputs,
        targets: &DVector<f64>,
        config: GpConfig,
    ) -> Result<Self, SurrogateError> {
        let init = Self::initial_hypers(&inputs, targets, config)?;
        Self::fit_from(inputs, targets, config, init)
    }

    /// Fit starting from explicit hyperparameters (skipping the data-driven
    /// initialization). With `config.fit_steps == 0` the model is built at
    /// exactly these hyperparameters.
    pub fn fit_from(
        inputs: GpInputs,
        targets: &DVector<f64>,
        config: GpConfig,
        init: GpHypers,
    ) -> Result<Self, SurrogateError> {
        Self::validate(&inputs, targets, config)?;
        let standardizer = if config.standardize {
            Standardizer::fit(targets).map_err(SurrogateError::from)?
        } else {
            Standardizer::identity()
        };
        let y = standardizer.encode_vec(targets);
        let prepared = Self::prepare(&inputs)?;

        let mut params = pack_params(config.kernel, &init);
        let bounds = Self::bounds(config.kernel, &init);
        let mut best_params = params.clone();
        let mut best_value = f64::NEG_INFINITY;

        let mut adam = Adam::new(AdamConfig::new(config.fit_lr), params.len());
        for _ in 0..=config.fit_steps {
            let eval = lml_and_grad(&prepared, config.kernel, &params, &y)?;
            if eval.value.is_finite() && eval.value > best_value {
                best_value = eval.value;
                best_params.copy_from(&params);
            }
            if !eval.grad.iter().all(|g| g.is_finite()) {
                break;
            }
            // Ascent: Adam minimizes, so feed the negated gradient.
            let neg_grad = -eval.grad;
            adam.step(&mut params, &neg_grad, 1.0);
            for (p, (lo, hi)) in params.iter_mut().zip(&bounds) {
                *p = p.clamp(*lo, *hi);
            }
        }

        let hypers = unpack_params(config.kernel, &best_params);
        let k = match &prepared {
            Prepared::Tanimoto(b) => b * hypers.outputscale,
            Prepared::Matern(d2) => matern_profile(d2, hypers.lengthscale) * hypers.outputscale,
        };
        let mut k_y = k;
        for i in 0..y.len() {
            k_y[(i, i)] += hypers.noise;
        }
        let (chol, jitter) = cholesky_with_jitter(&k_y, JITTER_INITIAL, JITTER_MAX)?;
        let alpha = chol.solve(&y);
        Ok(GpModel {
            kernel: config.kernel,
            hypers,
            inputs,
            y_std: y,
            standardizer,
            chol,
            alpha,
            jitter,
            lml: best_value,
        })
    }

    fn validate(
        inputs: &GpInputs,
        targets: &DVector<f64>,
        config: GpConfig,
    ) -> Result<(), SurrogateError> {
        if inputs.is_empty() {
            return Err(SurrogateError::NoTrainingData);
        }
        if inputs.len() != targets.len() {
            return Err(SurrogateError::RowMismatch {
                inputs: inputs.len(),
                targets: targets.len(),
            });
        }
        if !inputs.kind_matches(config.kernel) {
            return Err(SurrogateError::Invalid(
                "kernel kind does not match input representation".to_string(),
            ));
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(SurrogateError::NonFinite {
                what: "target".to_string(),
                where_: "GP fit".to_string(),
            });
        }
        Ok(())
    }

    fn prepare(inputs: &GpInputs) -> Result<Prepared, SurrogateError> {
        match inputs {
            GpInputs::Fingerprints(f) => Ok(Prepared::Tanimoto(tanimoto_base(f, f)?)),
            GpInputs::Dense(x) => Ok(Prepared::Matern(rowwise_sq_dists(x, x))),
        }
    }

    fn initial_hypers(
        inputs: &GpInputs,
        targets: &DVector<f64>,
        config: GpConfig,
    ) -> Result<GpHypers, SurrogateError> {
        Self::validate(inputs, targets, config)?;
        // In standardized target space the variance is 1 by construction;
        // without standardization use the sample variance.
        let var = if config.standardize {
            1.0
        } else {
            let n = targets.len() as f64;
            let mean = targets.sum() / n;
            let v = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
            if v > 0.0 {
                v
            } else {
                1.0
            }
        };
        let lengthscale = match inputs {
            GpInputs::Dense(x) => median_pairwise_distance(x),
            GpInputs::Fingerprints(_) => 1.0,
        };
        Ok(GpHypers {
            outputscale: var,
            lengthscale,
            noise: 1e-2 * var,
        })
    }

    /// Per-parameter clamp boxes in log space, keeping the optimizer away
    /// from numerically degenerate regions.
    fn bounds(kernel: KernelKind, init: &GpHypers) -> Vec<(f64, f64)> {
        let os = (1e-6f64.ln(), 1e6f64.ln());
        let noise = (1e-8f64.ln(), 1e2f64.ln());
        match kernel {
            KernelKind::Tanimoto => vec![os, noise],
            KernelKind::Matern52 => {
                let l0 = init.lengthscale.ln();
                vec![os, (l0 - 9.21, l0 + 9.21), noise]
            }
        }
    }

    pub fn hypers(&self) -> &GpHypers {
        &self.hypers
    }

    pub fn kernel(&self) -> KernelKind {
        self.kernel
    }

    /// Log marginal likelihood of the stored fit, recomputed from scratch
    /// (value only, standardized space).
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.y_std.len() as f64;
        -0.5 * self.y_std.dot(&self.alpha)
            - 0.5 * cholesky_log_det(&self.chol)
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    /// Posterior predictive at query inputs, in the original target scale.
    /// `include_noise` adds the fitted observation noise to the predictive
    /// (co)variance; `want_cov` also returns the full query covariance.
    pub fn posterior(
        &self,
        query: &GpInputs,
        include_noise: bool,
        want_cov: bool,
    ) -> Result<PosteriorPredictive, SurrogateError> {
        if query.is_empty() {
            return Err(SurrogateError::Invalid("empty query set".to_string()));
        }
        let k_star = kernel_matrix(self.kernel, &self.hypers, query, &self.inputs)?; // m x n
        let mean_std = &k_star * &self.alpha;
        let means = mean_std.map(|v| self.standardizer.decode_mean(v));

        let m = query.len();
        // v = K_y^-1 K*^T, so K* K_y^-1 K*^T = K* v.
        let v = self.chol.solve(&k_star.transpose());
        if want_cov {
            let k_qq = kernel_matrix(self.kernel, &self.hypers, query, query)?;
            let mut cov = k_qq - &k_star * &v;
            if include_noise {
                for i in 0..m {
                    cov[(i, i)] += self.hypers.noise;
                }
            }
            // Symmetrize and rescale to the original target variance.
            cov = (&cov + cov.transpose()) * 0.5;
            cov *= self.standardizer.std * self.standardizer.std;
            let variances = DVector::from_fn(m, |i, _| cov[(i, i)].max(0.0));
            PosteriorPredictive::new(
                DMatrix::from_column_slice(m, 1, means.as_slice()),
                DMatrix::from_column_slice(m, 1, variances.as_slice()),
                Some(vec![cov]),
            )
        } else {
            let prior_diag = match (self.kernel, query) {
                (KernelKind::Tanimoto, GpInputs::Fingerprints(_)) => self.hypers.outputscale,
                (KernelKind::Matern52, GpInputs::Dense(_)) => self.hypers.outputscale,
                _ => {
                    return Err(SurrogateError::Invalid(
                        "kernel kind does not match input representation".to_string(),
                    ));
                }
            };
            let mut variances = DVector::zeros(m);
            for i in 0..m {
                let reduction = k_star.row(i).transpose().dot(&v.column(i).clone_owned());
                let mut var = prior_diag - reduction;
                if include_noise {
                    var += self.hypers.noise;
                }
                variances[i] = self.standardizer.decode_variance(var.max(0.0));
            }
            PosteriorPredictive::new(
                DMatrix::from_column_slice(m, 1, means.as_slice()),
                DMatrix::from_column_slice(m, 1, variances.as_slice()),
                None,
            )
        }
    }
}
