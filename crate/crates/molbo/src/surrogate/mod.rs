//! Bayesian surrogate models over pool candidates.
//!
//! Every surrogate reduces to the same contract: given observed inputs and
//! targets, produce a Gaussian posterior predictive over a set of query
//! candidates. [`PosteriorPredictive`] carries per-candidate means and
//! variances for each output head, plus — when the surrogate family affords
//! it — a full cross-candidate covariance per output, which enables joint
//! Thompson sampling.

pub mod curvature;
pub mod gp;
pub mod laplace;
pub mod lora;
pub mod mlp;
pub mod transformer;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::linalg::LinalgError;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("training data is empty")]
    NoTrainingData,
    #[error("input dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("inputs and targets disagree: {inputs} input row(s), {targets} target row(s)")]
    RowMismatch { inputs: usize, targets: usize },
    #[error("non-finite {what} encountered at {where_}")]
    NonFinite { what: String, where_: String },
    #[error("hyperparameter {name} = {value} is out of range: {constraint}")]
    BadHyper {
        name: &'static str,
        value: f64,
        constraint: &'static str,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("{0}")]
    Invalid(String),
}

/// Gaussian posterior predictive over `n` query candidates and `c` outputs.
///
/// `means` and `variances` are `n x c`; `covariances`, when present, holds
/// one `n x n` matrix per output (the marginal variances are its diagonal).
/// Variances include observation noise only if the producing surrogate was
/// asked to add it.
#[derive(Debug, Clone)]
pub struct PosteriorPredictive {
    pub means: DMatrix<f64>,
    pub variances: DMatrix<f64>,
    pub covariances: Option<Vec<DMatrix<f64>>>,
}

impl PosteriorPredictive {
    /// Validate shapes and clamp tiny negative variances (numerical noise
    /// from subtractive covariance formulas) to zero.
    pub fn new(
        means: DMatrix<f64>,
        variances: DMatrix<f64>,
        covariances: Option<Vec<DMatrix<f64>>>,
    ) -> Result<Self, SurrogateError> {
        if means.shape() != variances.shape() {
            return Err(SurrogateError::Invalid(format!(
                "means {:?} and variances {:?} differ in shape",
                means.shape(),
                variances.shape()
            )));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(SurrogateError::NonFinite {
                what: "mean".to_string(),
                where_: "posterior predictive".to_string(),
            });
        }
        if variances.iter().any(|v| !v.is_finite()) {
            return Err(SurrogateError::NonFinite {
                what: "variance".to_string(),
                where_: "posterior predictive".to_string(),
            });
        }
        let variances = variances.map(|v| v.max(0.0));
        if let Some(covs) = &covariances {
            if covs.len() != means.ncols() {
                return Err(SurrogateError::Invalid(format!(
                    "{} covariance block(s) for {} output(s)",
                    covs.len(),
                    means.ncols()
                )));
            }
            for cov in covs {
                if cov.nrows() != means.nrows() || cov.ncols() != means.nrows() {
                    return Err(SurrogateError::Invalid(format!(
                        "covariance block is {}x{}, expected {}x{}",
                        cov.nrows(),
                        cov.ncols(),
                        means.nrows(),
                        means.nrows()
                    )));
                }
            }
        }
        Ok(PosteriorPredictive {
            means,
            variances,
            covariances,
        })
    }

    pub fn candidates(&self) -> usize {
        self.means.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.means.ncols()
    }
}
