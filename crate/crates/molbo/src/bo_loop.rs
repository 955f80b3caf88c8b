//! Campaign driver: Bayesian optimization over a finite candidate pool.
//!
//! One loop covers three regimes. With a GP or a Laplace-MLP surrogate the
//! candidate representation is fixed (fingerprints or a cached feature
//! matrix) and only the posterior is refit each iteration. With the PEFT
//! surrogate the adapters are reinitialized and retrained from scratch every
//! iteration on the observations so far. In all cases the loop is: refit on
//! the observed set, maximize the acquisition over the remaining candidates,
//! observe the tabulated objective of the chosen candidate, and move it from
//! the remaining set into the observed set.
//!
//! Traces record, per iteration, the chosen candidate, its raw objectives,
//! the running incumbent, wall time, and a digest of the acquisition scores.
//! Observed values always come from the pool's table - surrogate predictions
//! never enter a trace as observations.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::acquisition::{
    AcquisitionChoice, AcquisitionError, expected_improvement, scalarized_thompson,
    thompson_sample, upper_confidence_bound,
};
use crate::chem::{Fingerprint, morgan_fingerprint, parse_smiles};
use crate::hashing::{derive_seed, digest_f64s};
use crate::linalg::Standardizer;
use crate::metrics::gap;
use crate::pool::{CandidatePool, PoolError};
use crate::stats::mean_stderr;
use crate::surrogate::gp::{GpConfig, GpInputs, GpModel, KernelKind};
use crate::surrogate::laplace::{LaplaceConfig, fit_laplace};
use crate::surrogate::lora::{PeftConfig, fit_peft};
use crate::surrogate::mlp::{Activation, MlpConfig};
use crate::surrogate::transformer::{SmilesTokenizer, ToyTransformer};
use crate::surrogate::{PosteriorPredictive, SurrogateError};

/// Default cap on joint posterior sampling: above this many remaining
/// candidates, Thompson sampling falls back to marginal (independent) draws
/// and the trace flags the fallback.
pub const DEFAULT_JOINT_CAP: usize = 2048;

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("budget infeasible: m = {m} initial + T = {t} iterations > pool size {n}")]
    BadBudget { m: usize, t: usize, n: usize },
    #[error("surrogate/representation mismatch: {0}")]
    BadCombination(String),
    #[error("the pool has no attached feature matrix")]
    MissingFeatures,
    #[error("candidate {id}: {message}")]
    BadCandidate { id: String, message: String },
    #[error("{0}")]
    Pool(#[from] PoolError),
    #[error("{0}")]
    Surrogate(#[from] SurrogateError),
    #[error("{0}")]
    Acquisition(#[from] AcquisitionError),
    #[error("acquisition {name} supports single-objective campaigns only (got {outputs})")]
    MultiObjective { name: &'static str, outputs: usize },
    #[error("no seeds given")]
    NoSeeds,
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace {path}: {message}")]
    Trace { path: String, message: String },
}

/// How candidates are presented to the surrogate.
#[derive(Debug, Clone)]
pub enum Representation {
    /// Folded circular fingerprints computed from the SMILES column.
    Fingerprints { radius: u32, bits: usize },
    /// The pool's attached dense feature matrix.
    Features,
    /// Token sequences for the transformer surrogate (fixed length).
    Tokens { max_len: usize },
}

/// Acquisition rule. Thompson sampling generalizes to multiple objectives
/// through uniform-weight scalarization of one joint draw per objective.
#[derive(Debug, Clone)]
pub enum AcquisitionSpec {
    Thompson,
    ExpectedImprovement,
    Ucb { beta: f64 },
}

impl AcquisitionSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AcquisitionSpec::Thompson => "thompson",
            AcquisitionSpec::ExpectedImprovement => "ei",
            AcquisitionSpec::Ucb { .. } => "ucb",
        }
    }
}

/// Laplace-MLP surrogate hyperparameters; the input dimension comes from the
/// feature matrix and the output dimension is always one per objective.
#[derive(Debug, Clone)]
pub struct LaplaceMlpSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub base: LaplaceConfig,
}

impl LaplaceMlpSpec {
    pub fn new(hidden: Vec<usize>, activation: Activation) -> Self {
        let base = LaplaceConfig::new(MlpConfig {
            input_dim: 1, // overwritten per pool
            hidden: hidden.clone(),
            output_dim: 1,
            activation,
            bias: true,
        });
        LaplaceMlpSpec {
            hidden,
            activation,
            base,
        }
    }
}

/// Which surrogate drives the campaign.
#[derive(Debug, Clone)]
pub enum SurrogateSpec {
    Gp(GpConfig),
    LaplaceMlp(LaplaceMlpSpec),
    /// Frozen base encoder plus the adapter/head training recipe. Adapters
    /// are reinitialized and retrained from scratch at every iteration.
    LoraTransformer {
        base: Box<ToyTransformer>,
        peft: PeftConfig,
    },
}

impl SurrogateSpec {
    pub fn name(&self) -> &'static str {
        match self {
            SurrogateSpec::Gp(cfg) => match cfg.kernel {
                KernelKind::Tanimoto => "gp-tanimoto",
                KernelKind::Matern52 => "gp-matern",
            },
            SurrogateSpec::LaplaceMlp(_) => "laplace-mlp",
            SurrogateSpec::LoraTransformer { .. } => "lora-transformer",
        }
    }
}

/// Everything a single campaign needs besides the pool itself.
#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub surrogate: SurrogateSpec,
    pub representation: Representation,
    pub acquisition: AcquisitionSpec,
    /// Iteration budget T.
    pub t_budget: usize,
    /// Initial design size m.
    pub m_init: usize,
    pub seed: u64,
    /// Remaining-candidate count above which joint Thompson draws fall back
    /// to marginal sampling.
    pub joint_cap: usize,
}

/// One acquisition step of a finished campaign.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    /// 1-based iteration number.
    pub t: usize,
    /// Pool index of the chosen candidate.
    pub index: usize,
    pub id: String,
    /// Raw (original-scale) objectives from the pool table.
    pub objectives: Vec<f64>,
    /// Running incumbent after this observation (see `CampaignTrace`).
    pub incumbent: f64,
    pub wall_ms: f64,
    /// Digest of the acquisition scores over the remaining candidates.
    pub score_digest: u64,
    /// Whether the posterior draw behind this choice was joint.
    pub joint: bool,
}

/// Chronological record of one campaign. The incumbent column is the best
/// raw objective so far for single-objective runs (respecting direction) and
/// the best uniform mean of internal (maximization-convention) objectives
/// for multiobjective runs.
#[derive(Debug, Clone)]
pub struct CampaignTrace {
    pub seed: u64,
    /// Initial design: (pool index, id, raw objectives), in pool order.
    pub initial: Vec<(usize, String, Vec<f64>)>,
    pub iterations: Vec<IterationRecord>,
    /// Fit or acquisition failure that aborted the campaign, if any; the
    /// iterations recorded before the failure are kept.
    pub failure: Option<String>,
    /// Index/id/raw objectives of the best observed candidate.
    pub best_index: usize,
    pub best_id: String,
    pub best_objectives: Vec<f64>,
}

impl CampaignTrace {
    /// Internal (maximization-convention, uniformly scalarized) incumbent
    /// series: entry 0 is the incumbent after the initial design, entry t
    /// the incumbent after iteration t.
    pub fn incumbent_series(&self, pool: &CandidatePool) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        for (idx, _, _) in &self.initial {
            best = best.max(scalarize(&pool.internal_objectives(*idx)));
        }
        let mut series = vec![best];
        for rec in &self.iterations {
            best = best.max(scalarize(&pool.internal_objectives(rec.index)));
            series.push(best);
        }
        series
    }

    /// Every pool index this campaign observed, in selection order (initial
    /// design first).
    pub fn selected_indices(&self) -> Vec<usize> {
        self.initial
            .iter()
            .map(|(i, _, _)| *i)
            .chain(self.iterations.iter().map(|r| r.index))
            .collect()
    }
}

/// Uniform-weight scalarization of internal objectives; the identity for a
/// single objective.
pub fn scalarize(internal: &[f64]) -> f64 {
    internal.iter().sum::<f64>() / internal.len() as f64
}

/// Posterior provider for the loop: fit on the observed candidates and
/// predict over the query candidates, all by pool index. Targets arrive in
/// the internal maximization convention, one column per objective, and
/// predictions must come back in the same convention.
pub trait SurrogateDriver {
    fn fit_predict(
        &mut self,
        observed: &[usize],
        targets: &DMatrix<f64>,
        query: &[usize],
        want_cov: bool,
        seed: u64,
    ) -> Result<PosteriorPredictive, SurrogateError>;
}

/// GP driver over a fixed representation: refits hyperparameters from
/// scratch each call and predicts independently per objective.
pub struct GpDriver {
    inputs: GpInputs,
    config: GpConfig,
}

impl GpDriver {
    fn gather(&self, indices: &[usize]) -> GpInputs {
        match &self.inputs {
            GpInputs::Fingerprints(all) => {
                GpInputs::Fingerprints(indices.iter().map(|&i| all[i].clone()).collect())
            }
            GpInputs::Dense(all) => {
                let rows: Vec<_> = indices.iter().map(|&i| all.row(i)).collect();
                GpInputs::Dense(DMatrix::from_rows(&rows))
            }
        }
    }
}

impl SurrogateDriver for GpDriver {
    fn fit_predict(
        &mut self,
        observed: &[usize],
        targets: &DMatrix<f64>,
        query: &[usize],
        want_cov: bool,
        _seed: u64,
    ) -> Result<PosteriorPredictive, SurrogateError> {
        let train = self.gather(observed);
        let test = self.gather(query);
        let mut outputs = Vec::with_capacity(targets.ncols());
        for c in 0..targets.ncols() {
            let y = targets.column(c).into_owned();
            let model = GpModel::fit(train.clone(), &y, self.config)?;
            outputs.push(model.posterior(&test, true, want_cov)?);
        }
        stack_outputs(outputs)
    }
}

/// Laplace-MLP driver over a cached, pool-wide standardized feature matrix.
/// Targets are standardized per fit and predictions mapped back.
pub struct LaplaceMlpDriver {
    features: DMatrix<f64>,
    spec: LaplaceMlpSpec,
}

impl SurrogateDriver for LaplaceMlpDriver {
    fn fit_predict(
        &mut self,
        observed: &[usize],
        targets: &DMatrix<f64>,
        query: &[usize],
        want_cov: bool,
        seed: u64,
    ) -> Result<PosteriorPredictive, SurrogateError> {
        let gather = |indices: &[usize]| {
            let rows: Vec<_> = indices.iter().map(|&i| self.features.row(i)).collect();
            DMatrix::from_rows(&rows)
        };
        let x_train = gather(observed);
        let x_query = gather(query);
        let mut cfg = self.spec.base.clone();
        cfg.mlp = MlpConfig {
            input_dim: self.features.ncols(),
            hidden: self.spec.hidden.clone(),
            output_dim: 1,
            activation: self.spec.activation,
            bias: true,
        };
        let mut outputs = Vec::with_capacity(targets.ncols());
        for c in 0..targets.ncols() {
            let y_raw = targets.column(c).into_owned();
            let std = Standardizer::fit(&y_raw).map_err(SurrogateError::from)?;
            let y = DMatrix::from_column_slice(y_raw.len(), 1, std.encode_vec(&y_raw).as_slice());
            let fit = fit_laplace(&cfg, &x_train, &y, derive_seed(seed, "objective", c as u64))?;
            outputs.push(destandardize(
                fit.predict(&x_query, true, want_cov)?,
                &std,
            )?);
        }
        stack_outputs(outputs)
    }
}

/// PEFT driver: fresh adapters and head every call (full re-finetuning on
/// the observations so far), prediction through the linearized posterior.
pub struct LoraDriver {
    base: Box<ToyTransformer>,
    peft: PeftConfig,
    tokens: Vec<Vec<u32>>,
}

impl SurrogateDriver for LoraDriver {
    fn fit_predict(
        &mut self,
        observed: &[usize],
        targets: &DMatrix<f64>,
        query: &[usize],
        want_cov: bool,
        seed: u64,
    ) -> Result<PosteriorPredictive, SurrogateError> {
        let train: Vec<Vec<u32>> = observed.iter().map(|&i| self.tokens[i].clone()).collect();
        let test: Vec<Vec<u32>> = query.iter().map(|&i| self.tokens[i].clone()).collect();
        let mut outputs = Vec::with_capacity(targets.ncols());
        for c in 0..targets.ncols() {
            let y_raw = targets.column(c).into_owned();
            let std = Standardizer::fit(&y_raw).map_err(SurrogateError::from)?;
            let y = std.encode_vec(&y_raw);
            let fit = fit_peft(
                &self.base,
                &self.peft,
                &train,
                &y,
                derive_seed(seed, "objective", c as u64),
            )?;
            outputs.push(destandardize(fit.predict(&test, true, want_cov)?, &std)?);
        }
        stack_outputs(outputs)
    }
}

/// Map a standardized single-output posterior back to the original target
/// scale.
fn destandardize(
    post: PosteriorPredictive,
    std: &Standardizer,
) -> Result<PosteriorPredictive, SurrogateError> {
    let means = post.means.map(|v| std.decode_mean(v));
    let variances = post.variances.map(|v| std.decode_variance(v));
    let covariances = post
        .covariances
        .map(|covs| covs.into_iter().map(|c| c * (std.std * std.std)).collect());
    PosteriorPredictive::new(means, variances, covariances)
}

/// Combine independent single-output posteriors into one multi-output
/// posterior (no cross-objective covariance).
fn stack_outputs(outputs: Vec<PosteriorPredictive>) -> Result<PosteriorPredictive, SurrogateError> {
    if outputs.len() == 1 {
        let mut outputs = outputs;
        return Ok(outputs.pop().expect("one output"));
    }
    let n = outputs[0].candidates();
    let c = outputs.len();
    let mut means = DMatrix::zeros(n, c);
    let mut variances = DMatrix::zeros(n, c);
    let mut covariances = Vec::with_capacity(c);
    let mut have_cov = true;
    for (k, post) in outputs.iter().enumerate() {
        for i in 0..n {
            means[(i, k)] = post.means[(i, 0)];
            variances[(i, k)] = post.variances[(i, 0)];
        }
        match &post.covariances {
            Some(covs) => covariances.push(covs[0].clone()),
            None => have_cov = false,
        }
    }
    PosteriorPredictive::new(means, variances, have_cov.then_some(covariances))
}

/// Build the driver implied by a surrogate/representation pair, verifying
/// that the combination is meaningful.
pub fn build_driver(
    pool: &CandidatePool,
    config: &CampaignConfig,
) -> Result<Box<dyn SurrogateDriver + Send>, CampaignError> {
    match (&config.surrogate, &config.representation) {
        (SurrogateSpec::Gp(gp), Representation::Fingerprints { radius, bits }) => {
            if gp.kernel != KernelKind::Tanimoto {
                return Err(CampaignError::BadCombination(
                    "fingerprints require the Tanimoto kernel".to_string(),
                ));
            }
            let fps = pool_fingerprints(pool, *radius, *bits)?;
            Ok(Box::new(GpDriver {
                inputs: GpInputs::Fingerprints(fps),
                config: *gp,
            }))
        }
        (SurrogateSpec::Gp(gp), Representation::Features) => {
            if gp.kernel != KernelKind::Matern52 {
                return Err(CampaignError::BadCombination(
                    "dense features require the Matern-5/2 kernel".to_string(),
                ));
            }
            let features = dense_features(pool)?;
            Ok(Box::new(GpDriver {
                inputs: GpInputs::Dense(features),
                config: *gp,
            }))
        }
        (SurrogateSpec::LaplaceMlp(spec), Representation::Features) => {
            let features = standardize_columns(dense_features(pool)?);
            Ok(Box::new(LaplaceMlpDriver {
                features,
                spec: spec.clone(),
            }))
        }
        (SurrogateSpec::LoraTransformer { base, peft }, Representation::Tokens { max_len }) => {
            let tokenizer = SmilesTokenizer::new();
            let tokens: Vec<Vec<u32>> = pool
                .entries()
                .iter()
                .map(|e| tokenizer.encode(&e.smiles, *max_len))
                .collect();
            Ok(Box::new(LoraDriver {
                base: base.clone(),
                peft: peft.clone(),
                tokens,
            }))
        }
        (s, r) => Err(CampaignError::BadCombination(format!(
            "surrogate {} cannot consume representation {:?}",
            s.name(),
            r
        ))),
    }
}

fn pool_fingerprints(
    pool: &CandidatePool,
    radius: u32,
    bits: usize,
) -> Result<Vec<Fingerprint>, CampaignError> {
    pool.entries()
        .iter()
        .map(|e| {
            let mol = parse_smiles(&e.smiles).map_err(|err| CampaignError::BadCandidate {
                id: e.id.clone(),
                message: err.to_string(),
            })?;
            morgan_fingerprint(&mol, radius, bits).map_err(|err| CampaignError::BadCandidate {
                id: e.id.clone(),
                message: err.to_string(),
            })
        })
        .collect()
}

fn dense_features(pool: &CandidatePool) -> Result<DMatrix<f64>, CampaignError> {
    let features = pool.features().ok_or(CampaignError::MissingFeatures)?;
    let rows: Vec<_> = (0..features.rows()).map(|i| features.row(i)).collect();
    Ok(DMatrix::from_fn(features.rows(), features.dim(), |i, j| {
        rows[i][j]
    }))
}

/// Column-wise standardization over the whole pool (constant columns are
/// centered and left at unit scale).
fn standardize_columns(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows() as f64;
    for j in 0..m.ncols() {
        let mean = m.column(j).sum() / n;
        let var = m.column(j).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..m.nrows() {
            m[(i, j)] = (m[(i, j)] - mean) / std;
        }
    }
    m
}

/// The incumbent value recorded in traces: best raw objective for a single
/// objective (direction-aware), best scalarized internal value otherwise.
fn trace_incumbent(pool: &CandidatePool, best_internal: f64) -> f64 {
    if pool.objective_count() == 1 {
        pool.directions()[0].sign() * best_internal
    } else {
        best_internal
    }
}

fn acquire(
    spec: &AcquisitionSpec,
    post: &PosteriorPredictive,
    best_internal: f64,
    seed: u64,
) -> Result<AcquisitionChoice, CampaignError> {
    let outputs = post.outputs();
    match spec {
        AcquisitionSpec::Thompson => {
            if outputs == 1 {
                Ok(thompson_sample(post, seed)?)
            } else {
                Ok(scalarized_thompson(post, None, seed)?)
            }
        }
        AcquisitionSpec::ExpectedImprovement => {
            if outputs != 1 {
                return Err(CampaignError::MultiObjective { name: "ei", outputs });
            }
            Ok(expected_improvement(post, best_internal)?)
        }
        AcquisitionSpec::Ucb { beta } => {
            if outputs != 1 {
                return Err(CampaignError::MultiObjective {
                    name: "ucb",
                    outputs,
                });
            }
            Ok(upper_confidence_bound(post, *beta)?)
        }
    }
}

/// Run one campaign with a caller-supplied driver. `run_campaign` wires up
/// the driver from the config; this entry point exists so tests can inject
/// reference surrogates.
pub fn run_campaign_with_driver(
    mut pool: CandidatePool,
    config: &CampaignConfig,
    driver: &mut dyn SurrogateDriver,
) -> Result<CampaignTrace, CampaignError> {
    let n = pool.len();
    if config.m_init + config.t_budget > n {
        return Err(CampaignError::BadBudget {
            m: config.m_init,
            t: config.t_budget,
            n,
        });
    }
    let c = pool.objective_count();

    let initial = pool.sample_initial(config.m_init, derive_seed(config.seed, "init", 0))?;
    let mut observed: Vec<usize> = Vec::with_capacity(config.m_init + config.t_budget);
    let mut internal_rows: Vec<f64> = Vec::new();
    let mut best_internal = f64::NEG_INFINITY;
    let mut initial_records = Vec::with_capacity(initial.len());
    for (idx, raw) in &initial {
        observed.push(*idx);
        let internal = pool.internal_objectives(*idx);
        internal_rows.extend_from_slice(&internal);
        best_internal = best_internal.max(scalarize(&internal));
        initial_records.push((*idx, pool.entry(*idx).id.clone(), raw.clone()));
    }

    let mut iterations = Vec::with_capacity(config.t_budget);
    let mut failure = None;
    for t in 1..=config.t_budget {
        let started = Instant::now();
        let remaining = pool.remaining_indices();
        if remaining.is_empty() {
            break;
        }
        let targets = DMatrix::from_row_slice(observed.len(), c, &internal_rows);
        let want_cov = remaining.len() <= config.joint_cap;
        let step = (|| -> Result<AcquisitionChoice, CampaignError> {
            let post = driver.fit_predict(
                &observed,
                &targets,
                &remaining,
                want_cov,
                derive_seed(config.seed, "fit", t as u64),
            )?;
            acquire(
                &config.acquisition,
                &post,
                best_internal,
                derive_seed(config.seed, "acq", t as u64),
            )
        })();
        let choice = match step {
            Ok(choice) => choice,
            Err(e) => {
                failure = Some(format!("iteration {t}: {e}"));
                break;
            }
        };
        let index = remaining[choice.index];
        pool.mark_selected(index)?;
        observed.push(index);
        let internal = pool.internal_objectives(index);
        internal_rows.extend_from_slice(&internal);
        best_internal = best_internal.max(scalarize(&internal));
        iterations.push(IterationRecord {
            t,
            index,
            id: pool.entry(index).id.clone(),
            objectives: pool.entry(index).objectives.clone(),
            incumbent: trace_incumbent(&pool, best_internal),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            score_digest: digest_f64s(&choice.scores),
            joint: choice.joint,
        });
    }

    let (best_index, _) = observed
        .iter()
        .map(|&i| (i, scalarize(&pool.internal_objectives(i))))
        .fold((observed[0], f64::NEG_INFINITY), |acc, (i, v)| {
            if v > acc.1 { (i, v) } else { acc }
        });
    Ok(CampaignTrace {
        seed: config.seed,
        initial: initial_records,
        iterations,
        failure,
        best_index,
        best_id: pool.entry(best_index).id.clone(),
        best_objectives: pool.entry(best_index).objectives.clone(),
    })
}

/// Run one surrogate-driven campaign.
pub fn run_campaign(
    pool: CandidatePool,
    config: &CampaignConfig,
) -> Result<CampaignTrace, CampaignError> {
    let mut driver = build_driver(&pool, config)?;
    run_campaign_with_driver(pool, config, driver.as_mut())
}

/// Uniform without-replacement baseline with the same trace schema.
pub fn run_random_search(
    mut pool: CandidatePool,
    m_init: usize,
    t_budget: usize,
    seed: u64,
) -> Result<CampaignTrace, CampaignError> {
    let n = pool.len();
    if m_init + t_budget > n {
        return Err(CampaignError::BadBudget {
            m: m_init,
            t: t_budget,
            n,
        });
    }
    let initial = pool.sample_initial(m_init, derive_seed(seed, "init", 0))?;
    let mut observed = Vec::with_capacity(m_init + t_budget);
    let mut best_internal = f64::NEG_INFINITY;
    let mut initial_records = Vec::with_capacity(initial.len());
    for (idx, raw) in &initial {
        observed.push(*idx);
        best_internal = best_internal.max(scalarize(&pool.internal_objectives(*idx)));
        initial_records.push((*idx, pool.entry(*idx).id.clone(), raw.clone()));
    }
    let mut rng: ChaCha12Rng =
        rand::SeedableRng::seed_from_u64(derive_seed(seed, "random-search", 0));
    let mut iterations = Vec::with_capacity(t_budget);
    for t in 1..=t_budget {
        let started = Instant::now();
        let remaining = pool.remaining_indices();
        if remaining.is_empty() {
            break;
        }
        let index = remaining[rng.random_range(0..remaining.len())];
        pool.mark_selected(index)?;
        observed.push(index);
        best_internal = best_internal.max(scalarize(&pool.internal_objectives(index)));
        iterations.push(IterationRecord {
            t,
            index,
            id: pool.entry(index).id.clone(),
            objectives: pool.entry(index).objectives.clone(),
            incumbent: trace_incumbent(&pool, best_internal),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            score_digest: 0,
            joint: false,
        });
    }
    let (best_index, _) = observed
        .iter()
        .map(|&i| (i, scalarize(&pool.internal_objectives(i))))
        .fold((observed[0], f64::NEG_INFINITY), |acc, (i, v)| {
            if v > acc.1 { (i, v) } else { acc }
        });
    Ok(CampaignTrace {
        seed,
        initial: initial_records,
        iterations,
        failure: None,
        best_index,
        best_id: pool.entry(best_index).id.clone(),
        best_objectives: pool.entry(best_index).objectives.clone(),
    })
}

/// Per-t aggregate over completed replicates.
#[derive(Debug, Clone)]
pub struct AggregateCurves {
    /// Number of traces that completed the full budget without failure.
    pub completed: usize,
    /// Index t runs 0 (after the initial design) through T.
    pub mean_incumbent: Vec<f64>,
    pub stderr_incumbent: Vec<f64>,
    pub mean_gap: Vec<f64>,
    pub stderr_gap: Vec<f64>,
}

/// Traces plus aggregate statistics for a batch of seeds.
#[derive(Debug, Clone)]
pub struct ReplicateSet {
    pub traces: Vec<CampaignTrace>,
    pub aggregate: AggregateCurves,
    /// (seed, cause) for every replicate that aborted mid-campaign.
    pub failures: Vec<(u64, String)>,
}

/// Independent campaigns across seeds, in parallel over an immutable pool.
/// Per-seed failures are flagged and excluded from the aggregate curves.
pub fn run_replicates(
    pool: &CandidatePool,
    config: &CampaignConfig,
    seeds: &[u64],
) -> Result<ReplicateSet, CampaignError> {
    run_batch(pool, seeds, |seed| {
        let mut cfg = config.clone();
        cfg.seed = seed;
        run_campaign(pool.clone(), &cfg)
    })
}

/// Random-search replicates with the same aggregation.
pub fn run_random_replicates(
    pool: &CandidatePool,
    m_init: usize,
    t_budget: usize,
    seeds: &[u64],
) -> Result<ReplicateSet, CampaignError> {
    run_batch(pool, seeds, |seed| {
        run_random_search(pool.clone(), m_init, t_budget, seed)
    })
}

fn run_batch<F>(
    pool: &CandidatePool,
    seeds: &[u64],
    runner: F,
) -> Result<ReplicateSet, CampaignError>
where
    F: Fn(u64) -> Result<CampaignTrace, CampaignError> + Sync,
{
    if seeds.is_empty() {
        return Err(CampaignError::NoSeeds);
    }
    let results: Vec<Result<CampaignTrace, CampaignError>> =
        seeds.par_iter().map(|&s| runner(s)).collect();
    let mut traces = Vec::with_capacity(seeds.len());
    for r in results {
        traces.push(r?);
    }
    let failures: Vec<(u64, String)> = traces
        .iter()
        .filter_map(|t| t.failure.clone().map(|f| (t.seed, f)))
        .collect();
    let aggregate = aggregate_curves(pool, &traces);
    Ok(ReplicateSet {
        traces,
        aggregate,
        failures,
    })
}

/// Mean and standard error of the incumbent and GAP series over the traces
/// that completed their full budget.
pub fn aggregate_curves(pool: &CandidatePool, traces: &[CampaignTrace]) -> AggregateCurves {
    // The attainable optimum of the scalarized problem: the best single
    // candidate, not the scalarized utopia point (which no candidate
    // reaches once objectives trade off).
    let optimum = (0..pool.len())
        .map(|i| scalarize(&pool.internal_objectives(i)))
        .fold(f64::NEG_INFINITY, f64::max);
    let complete: Vec<&CampaignTrace> = traces.iter().filter(|t| t.failure.is_none()).collect();
    let horizon = complete
        .iter()
        .map(|t| t.iterations.len())
        .min()
        .unwrap_or(0);
    let mut mean_incumbent = Vec::with_capacity(horizon + 1);
    let mut stderr_incumbent = Vec::with_capacity(horizon + 1);
    let mut mean_gap = Vec::with_capacity(horizon + 1);
    let mut stderr_gap = Vec::with_capacity(horizon + 1);
    if !complete.is_empty() {
        let series: Vec<Vec<f64>> = complete
            .iter()
            .map(|t| t.incumbent_series(pool))
            .collect();
        for t in 0..=horizon {
            let incumbents: Vec<f64> = series.iter().map(|s| s[t]).collect();
            let gaps: Vec<f64> = series
                .iter()
                .map(|s| gap(s[t], s[0], optimum))
                .collect();
            let (mi, si) = mean_stderr(&incumbents);
            let (mg, sg) = mean_stderr(&gaps);
            mean_incumbent.push(mi);
            stderr_incumbent.push(si);
            mean_gap.push(mg);
            stderr_gap.push(sg);
        }
    }
    AggregateCurves {
        completed: complete.len(),
        mean_incumbent,
        stderr_incumbent,
        mean_gap,
        stderr_gap,
    }
}

/// Write one trace as CSV: the initial design appears as t=0 rows, then one
/// row per iteration. Columns: `t,id,y0..,incumbent,wall_ms`.
pub fn write_trace_csv(
    path: &Path,
    trace: &CampaignTrace,
    pool: &CandidatePool,
) -> Result<(), CampaignError> {
    let c = pool.objective_count();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let ys: Vec<String> = (0..c).map(|k| format!("y{k}")).collect();
    writeln!(w, "t,id,{},incumbent,wall_ms", ys.join(","))?;
    let mut best_internal = f64::NEG_INFINITY;
    for (idx, id, raw) in &trace.initial {
        best_internal = best_internal.max(scalarize(&pool.internal_objectives(*idx)));
        let vals: Vec<String> = raw.iter().map(|v| format!("{v}")).collect();
        writeln!(
            w,
            "0,{id},{},{},0",
            vals.join(","),
            trace_incumbent(pool, best_internal)
        )?;
    }
    for rec in &trace.iterations {
        let vals: Vec<String> = rec.objectives.iter().map(|v| format!("{v}")).collect();
        writeln!(
            w,
            "{},{},{},{},{}",
            rec.t,
            rec.id,
            vals.join(","),
            rec.incumbent,
            rec.wall_ms
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Read a trace CSV written by [`write_trace_csv`] back against its pool.
/// Ids are resolved to pool indices; an id the pool does not know is a
/// trace/pool mismatch. Score digests and joint flags are not part of the
/// CSV schema and come back zeroed, and the seed is the caller's label.
pub fn read_trace_csv(
    path: &Path,
    pool: &CandidatePool,
    seed: u64,
) -> Result<CampaignTrace, CampaignError> {
    let display = path.display().to_string();
    let bad = |message: String| CampaignError::Trace {
        path: display.clone(),
        message,
    };
    let c = pool.objective_count();
    let ys: Vec<String> = (0..c).map(|k| format!("y{k}")).collect();
    let expected_header = format!("t,id,{},incumbent,wall_ms", ys.join(","));

    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != expected_header {
        return Err(bad(format!(
            "header {header:?} does not match this pool's {c} objective column(s)"
        )));
    }
    let index_of: std::collections::HashMap<&str, usize> = pool
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id.as_str(), i))
        .collect();

    let mut initial = Vec::new();
    let mut iterations: Vec<IterationRecord> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != c + 4 {
            return Err(bad(format!(
                "row {}: expected {} fields, found {}",
                lineno + 2,
                c + 4,
                fields.len()
            )));
        }
        let row_err = |what: &str| bad(format!("row {}: bad {what} field", lineno + 2));
        let t: usize = fields[0].parse().map_err(|_| row_err("t"))?;
        let id = fields[1].to_string();
        let index = *index_of
            .get(id.as_str())
            .ok_or_else(|| bad(format!("id {id:?} is not in the pool")))?;
        let mut objectives = Vec::with_capacity(c);
        for f in &fields[2..2 + c] {
            objectives.push(f.parse::<f64>().map_err(|_| row_err("objective"))?);
        }
        let incumbent: f64 = fields[2 + c].parse().map_err(|_| row_err("incumbent"))?;
        let wall_ms: f64 = fields[3 + c].parse().map_err(|_| row_err("wall_ms"))?;
        if t == 0 {
            if !iterations.is_empty() {
                return Err(bad(format!(
                    "row {}: initial-design row after iteration rows",
                    lineno + 2
                )));
            }
            initial.push((index, id, objectives));
        } else {
            if t != iterations.len() + 1 {
                return Err(bad(format!(
                    "row {}: iteration {} out of order",
                    lineno + 2,
                    t
                )));
            }
            iterations.push(IterationRecord {
                t,
                index,
                id,
                objectives,
                incumbent,
                wall_ms,
                score_digest: 0,
                joint: false,
            });
        }
    }
    if initial.is_empty() {
        return Err(bad("no initial-design (t=0) rows".to_string()));
    }

    let observed: Vec<usize> = initial
        .iter()
        .map(|(i, _, _)| *i)
        .chain(iterations.iter().map(|r| r.index))
        .collect();
    let (best_index, _) = observed
        .iter()
        .map(|&i| (i, scalarize(&pool.internal_objectives(i))))
        .fold((observed[0], f64::NEG_INFINITY), |acc, (i, v)| {
            if v > acc.1 { (i, v) } else { acc }
        });
    Ok(CampaignTrace {
        seed,
        initial,
        iterations,
        failure: None,
        best_index,
        best_id: pool.entry(best_index).id.clone(),
        best_objectives: pool.entry(best_index).objectives.clone(),
    })
}
