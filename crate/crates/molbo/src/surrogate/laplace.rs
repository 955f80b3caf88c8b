//! Laplace-approximated MLP surrogate: MAP training, Gauss-Newton curvature
//! collection, evidence-based hyperparameter tuning, and the linearized
//! Gaussian predictive.
//!
//! The pipeline is:
//!
//! 1. `train_map` minimizes the exact MAP objective
//!        L(theta) = sum_i ||y_i - g(x_i)||^2 / (2 sigma2) + lambda/2 ||theta||^2
//!    with minibatch Adam, rescaling batch gradients by n/|B| so the
//!    stochastic gradient is unbiased for the full objective, and keeps the
//!    best iterate by full-data objective.
//! 2. `compute_ggn` accumulates the raw Gauss-Newton matrix around the MAP
//!    estimate in the requested structure (full / diagonal / KFAC).
//! 3. Optionally, `tune_marginal_likelihood` adjusts prior precision(s) and
//!    observation noise by evidence ascent.
//! 4. `LaplaceFit::predict` linearizes the network at the MAP estimate and
//!    returns the Gaussian predictive N(g(x), J Sigma J^T [+ sigma2 I]).
//!
//! On a network with no hidden layers the model is linear, every step above
//! is exact, and the posterior must coincide with Bayesian ridge regression;
//! the tests pin that correspondence down to numerical precision.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::hashing::derive_seed;
use crate::opt::{cosine_scale, Adam, AdamConfig};

use super::curvature::{
    tune_marginal_likelihood, CurvatureModel, CurvatureStructure, FitStats, GgnAccumulator,
    KfacLayerShape, MargLikConfig,
};
use super::mlp::{jacobian_from_sites, Mlp, MlpConfig};
use super::{PosteriorPredictive, SurrogateError};

/// Minibatch MAP training settings.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: u64,
    pub batch_size: usize,
    /// Prior precision of the isotropic Gaussian prior during training.
    pub lambda: f64,
    /// Observation noise variance during training.
    pub sigma2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 500,
            batch_size: 20,
            lambda: 5e-4,
            sigma2: 0.1,
        }
    }
}

/// How prior precisions are grouped for the evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorGrouping {
    /// One precision shared by all parameters.
    Scalar,
    /// One precision per layer.
    PerLayer,
}

/// Full Laplace surrogate settings.
#[derive(Debug, Clone)]
pub struct LaplaceConfig {
    pub mlp: MlpConfig,
    pub train: TrainConfig,
    pub structure: CurvatureStructure,
    pub grouping: PriorGrouping,
    /// Maximize the evidence over prior precision(s) and noise after the
    /// curvature is collected.
    pub tune: bool,
    pub marglik: MargLikConfig,
}

impl LaplaceConfig {
    pub fn new(mlp: MlpConfig) -> Self {
        LaplaceConfig {
            mlp,
            train: TrainConfig::default(),
            structure: CurvatureStructure::Kfac,
            grouping: PriorGrouping::Scalar,
            tune: true,
            marglik: MargLikConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainReport {
    pub initial_objective: f64,
    pub final_objective: f64,
}

/// The exact MAP objective on the full data set.
fn map_objective(
    mlp: &Mlp,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda: f64,
    sigma2: f64,
) -> Result<f64, SurrogateError> {
    let pred = mlp.forward(x)?;
    let sse = (&pred - y).map(|r| r * r).sum();
    let theta = mlp.params_flat();
    Ok(sse / (2.0 * sigma2) + 0.5 * lambda * theta.norm_squared())
}

/// Minimize the MAP objective with minibatch Adam and a cosine-annealed
/// learning rate. The network is left at the best full-data iterate, so the
/// reported final objective never exceeds the initial one.
pub fn train_map(
    mlp: &mut Mlp,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport, SurrogateError> {
    let n = x.nrows();
    if n == 0 {
        return Err(SurrogateError::NoTrainingData);
    }
    if y.nrows() != n {
        return Err(SurrogateError::RowMismatch {
            inputs: n,
            targets: y.nrows(),
        });
    }
    if y.ncols() != mlp.config().output_dim {
        return Err(SurrogateError::DimensionMismatch {
            expected: mlp.config().output_dim,
            found: y.ncols(),
        });
    }
    if cfg.batch_size == 0 {
        return Err(SurrogateError::BadHyper {
            name: "batch_size",
            value: 0.0,
            constraint: "must be at least 1",
        });
    }
    if !(cfg.sigma2.is_finite() && cfg.sigma2 > 0.0) {
        return Err(SurrogateError::BadHyper {
            name: "sigma2",
            value: cfg.sigma2,
            constraint: "must be finite and positive",
        });
    }
    if !(cfg.lambda.is_finite() && cfg.lambda >= 0.0) {
        return Err(SurrogateError::BadHyper {
            name: "lambda",
            value: cfg.lambda,
            constraint: "must be finite and non-negative",
        });
    }
    let batch = cfg.batch_size.min(n);

    let mut theta = mlp.params_flat();
    let mut adam = Adam::new(AdamConfig::new(cfg.lr), theta.len());
    let initial_objective = map_objective(mlp, x, y, cfg.lambda, cfg.sigma2)?;
    if !initial_objective.is_finite() {
        return Err(SurrogateError::NonFinite {
            what: "MAP objective".to_string(),
            where_: "initialization".to_string(),
        });
    }
    let mut best_theta = theta.clone();
    let mut best_objective = initial_objective;

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "epoch", epoch));
        order.shuffle(&mut rng);
        let lr_scale = cosine_scale(epoch, cfg.epochs);
        for chunk in order.chunks(batch) {
            let xb = DMatrix::from_fn(chunk.len(), x.ncols(), |r, c| x[(chunk[r], c)]);
            let yb = DMatrix::from_fn(chunk.len(), y.ncols(), |r, c| y[(chunk[r], c)]);
            let pred = mlp.forward(&xb)?;
            let delta = &pred - &yb;
            // Unbiased full-objective gradient: rescale the batch data term
            // by n/|B| and add the exact prior term.
            let data_grad = mlp.backward(&xb, &delta)?;
            let scale = n as f64 / (chunk.len() as f64 * cfg.sigma2);
            let grad = data_grad * scale + &theta * cfg.lambda;
            if !grad.iter().all(|g| g.is_finite()) {
                return Err(SurrogateError::NonFinite {
                    what: "gradient".to_string(),
                    where_: "MAP training".to_string(),
                });
            }
            adam.step(&mut theta, &grad, lr_scale);
            mlp.set_params_flat(&theta);
        }
        let objective = map_objective(mlp, x, y, cfg.lambda, cfg.sigma2)?;
        if !objective.is_finite() {
            return Err(SurrogateError::NonFinite {
                what: "MAP objective".to_string(),
                where_: "MAP training".to_string(),
            });
        }
        if objective < best_objective {
            best_objective = objective;
            best_theta.copy_from(&theta);
        }
    }
    mlp.set_params_flat(&best_theta);
    Ok(TrainReport {
        initial_objective,
        final_objective: best_objective,
    })
}

fn prior_groups(mlp: &Mlp, grouping: PriorGrouping) -> Vec<std::ops::Range<usize>> {
    match grouping {
        PriorGrouping::Scalar => vec![0..mlp.param_count()],
        PriorGrouping::PerLayer => mlp.config().layer_ranges(),
    }
}

/// Accumulate the raw Gauss-Newton curvature of `mlp` over the inputs in the
/// requested structure and attach (sigma2, prior groups, initial lambda).
///
/// The full structure materializes a param_count^2 matrix; keep it to small
/// networks and prefer KFAC otherwise.
pub fn compute_ggn(
    mlp: &Mlp,
    x: &DMatrix<f64>,
    structure: CurvatureStructure,
    grouping: PriorGrouping,
    sigma2: f64,
    lambda_init: f64,
) -> Result<CurvatureModel, SurrogateError> {
    if x.nrows() == 0 {
        return Err(SurrogateError::NoTrainingData);
    }
    let p = mlp.param_count();
    let mut acc = match structure {
        CurvatureStructure::Full => GgnAccumulator::full(p),
        CurvatureStructure::Diagonal => GgnAccumulator::diagonal(p),
        CurvatureStructure::Kfac => {
            // The parameter matrix of each layer is out x (in + bias).
            let b = usize::from(mlp.config().bias);
            let shapes = mlp
                .config()
                .layer_ranges()
                .into_iter()
                .zip(mlp.config().layer_dims())
                .map(|(range, (rows, cols))| KfacLayerShape {
                    range,
                    rows,
                    cols: cols + b,
                })
                .collect();
            GgnAccumulator::kfac(shapes, p)?
        }
    };
    let ranges = mlp.config().layer_ranges();
    for i in 0..x.nrows() {
        let xi = x.row(i).transpose();
        let sites = mlp.sample_sites(&xi)?;
        match structure {
            CurvatureStructure::Kfac => acc.add_sites(&sites)?,
            _ => acc.add_jacobian(&jacobian_from_sites(&ranges, &sites, p))?,
        }
    }
    let groups = prior_groups(mlp, grouping);
    let lambda = vec![lambda_init; groups.len()];
    acc.finalize(sigma2, groups, lambda)
}

/// A trained Laplace surrogate: the MAP network, its curvature, and the fit
/// statistics the evidence needs.
pub struct LaplaceFit {
    pub mlp: Mlp,
    pub curvature: CurvatureModel,
    pub stats: FitStats,
    pub train: TrainReport,
    /// Evidence before/after tuning, when tuning ran.
    pub evidence: Option<(f64, f64)>,
}

/// Train, collect curvature, and (optionally) tune the evidence, starting
/// from a fresh random initialization.
pub fn fit_laplace(
    cfg: &LaplaceConfig,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    seed: u64,
) -> Result<LaplaceFit, SurrogateError> {
    let mut mlp = Mlp::init(cfg.mlp.clone(), derive_seed(seed, "mlp-init", 0))?;
    let train = train_map(&mut mlp, x, y, &cfg.train, derive_seed(seed, "map", 0))?;

    let pred = mlp.forward(x)?;
    let sse = (&pred - y).map(|r| r * r).sum();
    let stats = FitStats {
        n_obs: y.nrows() * y.ncols(),
        sse,
    };

    let mut curvature = compute_ggn(
        &mlp,
        x,
        cfg.structure,
        cfg.grouping,
        cfg.train.sigma2,
        cfg.train.lambda.max(1e-8),
    )?;
    let evidence = if cfg.tune {
        let theta = mlp.params_flat();
        let report = tune_marginal_likelihood(&mut curvature, &theta, &stats, &cfg.marglik)?;
        Some((report.initial_evidence, report.final_evidence))
    } else {
        None
    };
    Ok(LaplaceFit {
        mlp,
        curvature,
        stats,
        train,
        evidence,
    })
}

impl LaplaceFit {
    /// Linearized Gaussian predictive at the query rows. Means are the plain
    /// network outputs; (co)variances come from the curvature quadratic form
    /// J Sigma J^T, plus sigma2 on the diagonal when `include_noise`.
    ///
    /// With `want_cov` the joint covariance across all query rows is
    /// materialized per output (quadratic in the number of rows).
    pub fn predict(
        &self,
        x: &DMatrix<f64>,
        include_noise: bool,
        want_cov: bool,
    ) -> Result<PosteriorPredictive, SurrogateError> {
        let n = x.nrows();
        if n == 0 {
            return Err(SurrogateError::NoTrainingData);
        }
        let c_out = self.mlp.config().output_dim;
        let p = self.mlp.param_count();
        let ranges = self.mlp.config().layer_ranges();
        let means = self.mlp.forward(x)?;

        // Per-sample output Jacobians.
        let jacs: Vec<DMatrix<f64>> = (0..n)
            .map(|i| {
                let xi = x.row(i).transpose();
                let sites = self.mlp.sample_sites(&xi)?;
                Ok(jacobian_from_sites(&ranges, &sites, p))
            })
            .collect::<Result<_, SurrogateError>>()?;

        let noise = if include_noise {
            self.curvature.sigma2
        } else {
            0.0
        };
        let mut variances = DMatrix::zeros(n, c_out);
        let mut covariances = want_cov.then(|| Vec::with_capacity(c_out));
        for c in 0..c_out {
            if let Some(covs) = covariances.as_mut() {
                // Stack output c's Jacobian rows across queries for the
                // joint covariance.
                let stacked = DMatrix::from_fn(n, p, |r, q| jacs[r][(c, q)]);
                let mut cov = self.curvature.quad_form(&stacked)?;
                for i in 0..n {
                    cov[(i, i)] += noise;
                    variances[(i, c)] = cov[(i, i)];
                }
                covs.push(cov);
            } else {
                for (i, jac) in jacs.iter().enumerate() {
                    let row = DMatrix::from_fn(1, p, |_, q| jac[(c, q)]);
                    let var = self.curvature.quad_form(&row)?[(0, 0)];
                    variances[(i, c)] = var + noise;
                }
            }
        }
        PosteriorPredictive::new(means, variances, covariances)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogate::mlp::Activation;
    use nalgebra::DVector;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn linear_config(p: usize) -> MlpConfig {
        MlpConfig {
            input_dim: p,
            hidden: vec![],
            output_dim: 1,
            activation: Activation::Tanh,
            bias: false,
        }
    }

    fn random_data(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal));
        let theta = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DMatrix::from_fn(n, 1, |r, _| {
            x.row(r).transpose().dot(&theta) + 0.3 * rng.sample::<f64, _>(StandardNormal)
        });
        (x, y)
    }

    fn ridge_solution(
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        lambda: f64,
        sigma2: f64,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let p = x.ncols();
        let prec = x.transpose() * x / sigma2 + DMatrix::identity(p, p) * lambda;
        let sigma = prec.try_inverse().unwrap();
        let theta = &sigma * x.transpose() * y.column(0) / sigma2;
        (theta, sigma)
    }

    #[test]
    fn map_training_reaches_the_ridge_solution() {
        // A no-hidden-layer network is linear, so the MAP objective is the
        // ridge objective and the trained parameters must match the closed
        // form (X^T X / s2 + lambda I)^-1 X^T y / s2.
        let (n, p) = (30, 4);
        let (x, y) = random_data(n, p, 1);
        let cfg = TrainConfig {
            lr: 0.05,
            epochs: 4000,
            batch_size: n, // full batch for a deterministic path to the optimum
            lambda: 0.7,
            sigma2: 0.25,
        };
        let mut mlp = Mlp::init(linear_config(p), 2).unwrap();
        let report = train_map(&mut mlp, &x, &y, &cfg, 3).unwrap();
        assert!(report.final_objective <= report.initial_objective);

        let (theta_star, _) = ridge_solution(&x, &y, cfg.lambda, cfg.sigma2);
        let theta_hat = mlp.params_flat();
        for i in 0..p {
            assert_relative_eq!(theta_hat[i], theta_star[i], epsilon = 1e-4);
        }
        // The closed-form optimum cannot be beaten.
        let obj_hat = map_objective(&mlp, &x, &y, cfg.lambda, cfg.sigma2).unwrap();
        let mut at_star = Mlp::init(linear_config(p), 4).unwrap();
        at_star.set_params_flat(&DVector::from_iterator(p, theta_star.iter().copied()));
        let obj_star = map_objective(&at_star, &x, &y, cfg.lambda, cfg.sigma2).unwrap();
        assert!(obj_hat >= obj_star - 1e-9);
        assert!(obj_hat - obj_star < 1e-6);
    }

    #[test]
    fn minibatch_training_also_converges_near_the_optimum() {
        let (n, p) = (40, 3);
        let (x, y) = random_data(n, p, 5);
        let cfg = TrainConfig {
            lr: 0.02,
            epochs: 2000,
            batch_size: 13, // deliberately not dividing n
            lambda: 0.5,
            sigma2: 0.2,
        };
        let mut mlp = Mlp::init(linear_config(p), 6).unwrap();
        train_map(&mut mlp, &x, &y, &cfg, 7).unwrap();
        let (theta_star, _) = ridge_solution(&x, &y, cfg.lambda, cfg.sigma2);
        let theta_hat = mlp.params_flat();
        for i in 0..p {
            assert_relative_eq!(theta_hat[i], theta_star[i], epsilon = 2e-3);
        }
    }

    #[test]
    fn linear_model_posterior_is_exact_bayesian_ridge() {
        // Full-curvature Laplace on the linear model is conjugate Bayesian
        // linear regression: predictive mean x* theta-hat and variance
        // x*^T Sigma x* must match the closed form built from the trained
        // parameters.
        let (n, p) = (25, 3);
        let (x, y) = random_data(n, p, 8);
        let mut cfg = LaplaceConfig::new(linear_config(p));
        cfg.structure = CurvatureStructure::Full;
        cfg.tune = false;
        cfg.train = TrainConfig {
            lr: 0.05,
            epochs: 3000,
            batch_size: n,
            lambda: 0.9,
            sigma2: 0.3,
        };
        let fit = fit_laplace(&cfg, &x, &y, 9).unwrap();

        let theta_hat = fit.mlp.params_flat();
        let prec = x.transpose() * &x / cfg.train.sigma2
            + DMatrix::identity(p, p) * cfg.train.lambda;
        let sigma = prec.try_inverse().unwrap();

        let queries = {
            let mut rng = ChaCha12Rng::seed_from_u64(10);
            DMatrix::from_fn(5, p, |_, _| rng.sample(StandardNormal))
        };
        let post = fit.predict(&queries, false, true).unwrap();
        for i in 0..queries.nrows() {
            let q = queries.row(i).transpose();
            assert_relative_eq!(post.means[(i, 0)], q.dot(&theta_hat), epsilon = 1e-9);
            let direct_var = (q.transpose() * &sigma * &q)[(0, 0)];
            assert_relative_eq!(post.variances[(i, 0)], direct_var, epsilon = 1e-8);
        }
        // Joint covariance cross terms too.
        let cov = &post.covariances.as_ref().unwrap()[0];
        let direct_cov = &queries * &sigma * queries.transpose();
        assert_relative_eq!(cov, &direct_cov, epsilon = 1e-8);

        // Observation noise enters the diagonal only.
        let with_noise = fit.predict(&queries, true, false).unwrap();
        for i in 0..queries.nrows() {
            assert_relative_eq!(
                with_noise.variances[(i, 0)],
                post.variances[(i, 0)] + cfg.train.sigma2,
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn kfac_and_full_agree_on_a_linear_model() {
        // A single linear layer is one KFAC block with identity
        // sensitivities, where the factorization is exact (up to damping).
        let (n, p) = (20, 4);
        let (x, y) = random_data(n, p, 11);
        let train = TrainConfig {
            lr: 0.05,
            epochs: 1500,
            batch_size: n,
            lambda: 0.8,
            sigma2: 0.2,
        };
        let mut full_cfg = LaplaceConfig::new(linear_config(p));
        full_cfg.structure = CurvatureStructure::Full;
        full_cfg.tune = false;
        full_cfg.train = train;
        let mut kfac_cfg = full_cfg.clone();
        kfac_cfg.structure = CurvatureStructure::Kfac;

        let full = fit_laplace(&full_cfg, &x, &y, 12).unwrap();
        let kfac = fit_laplace(&kfac_cfg, &x, &y, 12).unwrap();
        let queries = {
            let mut rng = ChaCha12Rng::seed_from_u64(13);
            DMatrix::from_fn(4, p, |_, _| rng.sample(StandardNormal))
        };
        let pf = full.predict(&queries, false, false).unwrap();
        let pk = kfac.predict(&queries, false, false).unwrap();
        assert_relative_eq!(pf.means, pk.means, epsilon = 1e-12);
        assert_relative_eq!(pf.variances, pk.variances, epsilon = 1e-4, max_relative = 1e-4);
    }

    #[test]
    fn nonlinear_fit_learns_and_tunes() {
        // A small tanh network on sin(x): training must reduce the MAP
        // objective substantially, tuning must not lower the evidence, and
        // the predictive must be finite with positive variances.
        let n = 40;
        let x = DMatrix::from_fn(n, 1, |r, _| -3.0 + 6.0 * r as f64 / (n - 1) as f64);
        let y = DMatrix::from_fn(n, 1, |r, _| x[(r, 0)].sin());
        let mut cfg = LaplaceConfig::new(MlpConfig {
            input_dim: 1,
            hidden: vec![16, 16],
            output_dim: 1,
            activation: Activation::Tanh,
            bias: true,
        });
        cfg.structure = CurvatureStructure::Kfac;
        cfg.train.epochs = 800;
        cfg.train.lr = 5e-3;
        let fit = fit_laplace(&cfg, &x, &y, 14).unwrap();
        let mse = fit.stats.sse / n as f64;
        assert!(mse < 0.05, "mse = {mse}");
        let (before, after) = fit.evidence.unwrap();
        assert!(after >= before);

        let post = fit.predict(&x, true, false).unwrap();
        assert!(post.means.iter().all(|m| m.is_finite()));
        assert!(post
            .variances
            .iter()
            .all(|v| v.is_finite() && *v >= fit.curvature.sigma2));
    }

    #[test]
    fn training_validates_inputs() {
        let mut mlp = Mlp::init(linear_config(2), 1).unwrap();
        let x = DMatrix::zeros(3, 2);
        let y = DMatrix::zeros(2, 1);
        let cfg = TrainConfig::default();
        assert!(matches!(
            train_map(&mut mlp, &x, &y, &cfg, 0),
            Err(SurrogateError::RowMismatch { .. })
        ));
        let y3 = DMatrix::zeros(3, 2);
        assert!(matches!(
            train_map(&mut mlp, &x, &y3, &cfg, 0),
            Err(SurrogateError::DimensionMismatch { .. })
        ));
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        let y1 = DMatrix::zeros(3, 1);
        assert!(matches!(
            train_map(&mut mlp, &x, &y1, &bad, 0),
            Err(SurrogateError::BadHyper { .. })
        ));
    }

    #[test]
    fn training_is_deterministic_in_the_seed() {
        let (x, y) = random_data(15, 3, 20);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let run = |seed| {
            let mut mlp = Mlp::init(linear_config(3), 21).unwrap();
            train_map(&mut mlp, &x, &y, &cfg, seed).unwrap();
            mlp.params_flat()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }
}
