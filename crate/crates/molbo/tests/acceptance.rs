//! Acceptance suite: one test per release criterion, in order. Every test
//! prints a single `criterion N: PASS|FAIL — ...` line carrying its measured
//! numbers (visible with `--nocapture`) and fails on violation, so the
//! standard harness output also reads as one pass/fail line per criterion.
//!
//! The synthetic-pool campaign batches behind criteria 9, 10, and 12 and the
//! LoRA batch behind criteria 11 and 12 each run once and are shared through
//! `OnceLock`.

use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use molbo::acquisition::thompson_sample;
use molbo::bo_loop::{
    run_campaign, run_random_replicates, run_replicates, scalarize, AcquisitionSpec,
    CampaignConfig, CampaignTrace, LaplaceMlpSpec, ReplicateSet, Representation, SurrogateSpec,
    DEFAULT_JOINT_CAP,
};
use molbo::chem::{morgan_fingerprint, parse_smiles, tanimoto, write_smiles, Fingerprint};
use molbo::metrics::hypervolume;
use molbo::pool::{CandidatePool, Direction, FeatureMatrix, PoolEntry};
use molbo::surrogate::curvature::{
    log_evidence, tune_marginal_likelihood, CurvatureStructure, FitStats, MargLikConfig,
};
use molbo::surrogate::gp::{lml_with_gradient, GpConfig, GpHypers, GpInputs, KernelKind};
use molbo::surrogate::laplace::{compute_ggn, LaplaceFit, PriorGrouping, TrainConfig, TrainReport};
use molbo::surrogate::lora::PeftConfig;
use molbo::surrogate::mlp::{Activation, Mlp, MlpConfig};
use molbo::surrogate::transformer::{SmilesTokenizer, ToyTransformer, TransformerConfig};
use molbo::PosteriorPredictive;

// ---------------------------------------------------------------------------
// reporting

fn report(criterion: usize, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {criterion}: {verdict} — {detail}");
    println!("{line}");
    assert!(pass, "{line}");
}

// ---------------------------------------------------------------------------
// shared fixtures

fn standard_normal_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Bayesian linear regression with a known conjugate posterior: N(0,1)
/// design, Gaussian weight prior with precision `lambda`, noise variance
/// `sigma2`. `map` is the exact posterior mean and `precision` the posterior
/// precision X^T X / sigma2 + lambda I.
struct ConjugateProblem {
    x: DMatrix<f64>,
    y: DVector<f64>,
    lambda: f64,
    sigma2: f64,
    map: DVector<f64>,
    precision: DMatrix<f64>,
}

fn conjugate_problem(n: usize, d: usize, lambda: f64, sigma2: f64, seed: u64) -> ConjugateProblem {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let x = standard_normal_matrix(&mut rng, n, d);
    let theta_true = DVector::from_fn(d, |_, _| 0.7 * rng.sample::<f64, _>(StandardNormal));
    let noise = DVector::from_fn(n, |_, _| {
        sigma2.sqrt() * rng.sample::<f64, _>(StandardNormal)
    });
    let y = &x * &theta_true + noise;
    let mut precision = x.transpose() * &x / sigma2;
    for i in 0..d {
        precision[(i, i)] += lambda;
    }
    let chol = precision.clone().cholesky().expect("posterior precision");
    let map = chol.solve(&(x.transpose() * &y / sigma2));
    ConjugateProblem {
        x,
        y,
        lambda,
        sigma2,
        map,
        precision,
    }
}

/// A linear network (no hidden layers, no bias) holding exactly the given
/// weights, so its linearization is the model itself.
fn linear_network(weights: &DVector<f64>) -> Mlp {
    let cfg = MlpConfig {
        input_dim: weights.len(),
        hidden: vec![],
        output_dim: 1,
        activation: Activation::Tanh,
        bias: false,
    };
    let mut mlp = Mlp::init(cfg, 0).expect("linear network");
    mlp.set_params_flat(weights);
    mlp
}

fn random_fingerprint(rng: &mut ChaCha12Rng, width: usize, on_bits: usize) -> Fingerprint {
    let bits: Vec<usize> = (0..on_bits).map(|_| rng.random_range(0..width)).collect();
    Fingerprint::from_on_bits(width, &bits).expect("fingerprint width")
}

// ---------------------------------------------------------------------------
// criterion 1: linearized-Laplace exactness on a conjugate linear model

#[test]
fn criterion_01_linearized_laplace_matches_the_conjugate_closed_form() {
    let started = Instant::now();
    let (n, d) = (20, 5);
    let problem = conjugate_problem(n, d, 2.0, 0.25, 11);

    // Closed-form predictive at fresh query points.
    let mut rng = ChaCha12Rng::seed_from_u64(12);
    let query = standard_normal_matrix(&mut rng, 8, d);
    let chol = problem.precision.clone().cholesky().expect("precision");
    let mean_oracle = &query * &problem.map;
    let cov_oracle = &query * chol.solve(&query.transpose());

    // Laplace around the exact MAP of the same prior/noise.
    let mlp = linear_network(&problem.map);
    let residual = &problem.x * &problem.map - &problem.y;
    let stats = FitStats {
        n_obs: n,
        sse: residual.norm_squared(),
    };
    let curvature = compute_ggn(
        &mlp,
        &problem.x,
        CurvatureStructure::Full,
        PriorGrouping::Scalar,
        problem.sigma2,
        problem.lambda,
    )
    .expect("full curvature");
    let fit = LaplaceFit {
        mlp,
        curvature,
        stats,
        train: TrainReport {
            initial_objective: 0.0,
            final_objective: 0.0,
        },
        evidence: None,
    };
    let post = fit.predict(&query, false, true).expect("posterior");

    let mean_err = (0..8)
        .map(|i| (post.means[(i, 0)] - mean_oracle[i]).abs())
        .fold(0.0, f64::max);
    let cov = &post.covariances.as_ref().expect("joint covariance")[0];
    let cov_err = (cov - &cov_oracle).abs().max();
    let elapsed = started.elapsed();

    report(
        1,
        mean_err <= 1e-6 && cov_err <= 1e-6 && elapsed < Duration::from_secs(1),
        &format!(
            "full-curvature linearized Laplace vs conjugate closed form (d=5, n=20): \
             max |mean error| {mean_err:.2e}, max |covariance error| {cov_err:.2e} \
             (tolerance 1e-6), {:.0} ms (budget 1 s)",
            elapsed.as_secs_f64() * 1e3
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 2: evidence tuning lands on the grid-search optimum

#[test]
fn criterion_02_evidence_tuning_matches_a_log_grid_oracle() {
    let started = Instant::now();
    let (n, d) = (20, 5);
    let problem = conjugate_problem(n, d, 1.0, 0.25, 21);
    let mlp = linear_network(&problem.map);
    let theta = mlp.params_flat();
    let residual = &problem.x * &problem.map - &problem.y;
    let stats = FitStats {
        n_obs: n,
        sse: residual.norm_squared(),
    };
    let mut model = compute_ggn(
        &mlp,
        &problem.x,
        CurvatureStructure::Full,
        PriorGrouping::Scalar,
        problem.sigma2,
        problem.lambda,
    )
    .expect("full curvature");

    // Tune the single prior precision with the noise held fixed.
    let cfg = MargLikConfig {
        tune_sigma2: false,
        ..MargLikConfig::default()
    };
    tune_marginal_likelihood(&mut model, &theta, &stats, &cfg).expect("evidence tuning");
    let lambda_star = model.lambda[0];

    // Oracle: exhaustive 200-point log grid over the tuner's own bounds.
    let (lo, hi) = (cfg.lambda_bounds.0.ln(), cfg.lambda_bounds.1.ln());
    let grid_points = 200;
    let step = (hi - lo) / (grid_points - 1) as f64;
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for g in 0..grid_points {
        let lambda = (lo + g as f64 * step).exp();
        model.lambda[0] = lambda;
        let evidence = log_evidence(&model, &theta, &stats).expect("evidence");
        if evidence > best.0 {
            best = (evidence, lambda);
        }
    }
    let lambda_grid = best.1;
    let log_offset = (lambda_star.ln() - lambda_grid.ln()).abs();
    let elapsed = started.elapsed();

    report(
        2,
        log_offset <= step + 1e-9 && elapsed < Duration::from_secs(5),
        &format!(
            "tuned prior precision {lambda_star:.4} vs 200-point log-grid argmax \
             {lambda_grid:.4}: |log offset| {log_offset:.4} <= grid step {step:.4}, \
             {:.0} ms (budget 5 s)",
            elapsed.as_secs_f64() * 1e3
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 3: Gauss-Newton curvature vs finite-difference Jacobians

#[test]
fn criterion_03_ggn_matches_finite_difference_jacobians() {
    let cfg = MlpConfig {
        input_dim: 2,
        hidden: vec![2],
        output_dim: 1,
        activation: Activation::Tanh,
        bias: true,
    };
    let mut mlp = Mlp::init(cfg, 99).expect("network");
    let mut rng = ChaCha12Rng::seed_from_u64(31);
    let x = standard_normal_matrix(&mut rng, 10, 2);
    let p = mlp.param_count();

    // Brute force: central finite differences of the outputs in every
    // parameter, stacked into per-sample Jacobian rows.
    let theta = mlp.params_flat();
    let h = 1e-5;
    let mut jac = DMatrix::zeros(10, p);
    for q in 0..p {
        let mut plus = theta.clone();
        plus[q] += h;
        mlp.set_params_flat(&plus);
        let f_plus = mlp.forward(&x).expect("forward");
        let mut minus = theta.clone();
        minus[q] -= h;
        mlp.set_params_flat(&minus);
        let f_minus = mlp.forward(&x).expect("forward");
        for i in 0..10 {
            jac[(i, q)] = (f_plus[(i, 0)] - f_minus[(i, 0)]) / (2.0 * h);
        }
    }
    mlp.set_params_flat(&theta);
    let ggn_fd = jac.transpose() * &jac;

    let full = compute_ggn(
        &mlp,
        &x,
        CurvatureStructure::Full,
        PriorGrouping::Scalar,
        1.0,
        1.0,
    )
    .expect("full curvature");
    let diagonal = compute_ggn(
        &mlp,
        &x,
        CurvatureStructure::Diagonal,
        PriorGrouping::Scalar,
        1.0,
        1.0,
    )
    .expect("diagonal curvature");
    let ggn_full = full.raw_ggn().expect("dense view");
    let ggn_diag = diagonal.raw_ggn().expect("dense view");

    let rel = (&ggn_full - &ggn_fd).norm() / ggn_fd.norm();
    let diag_exact = (0..p).all(|q| ggn_diag[(q, q)] == ggn_full[(q, q)])
        && (0..p).all(|a| (0..p).all(|b| a == b || ggn_diag[(a, b)] == 0.0));

    report(
        3,
        rel < 1e-5 && diag_exact,
        &format!(
            "full GGN of a 2-2-1 tanh network over 10 samples vs finite-difference \
             Jacobians: relative error {rel:.2e} (tolerance 1e-5); diagonal structure \
             equals diag(full) exactly: {diag_exact}"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 4: GP log-marginal-likelihood gradients vs finite differences

#[test]
fn criterion_04_gp_lml_gradients_match_finite_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    let mut instances = 0;

    let mut check = |kernel: KernelKind, hypers: GpHypers, inputs: &GpInputs, y: &DVector<f64>| {
        let (_, grad) = lml_with_gradient(kernel, &hypers, inputs, y).expect("analytic gradient");
        let h: f64 = 1e-5;
        let mut grad_fd = Vec::with_capacity(grad.len());
        for k in 0..grad.len() {
            // Perturb one hyperparameter multiplicatively: the gradient is
            // taken in log scale.
            let bump = |scale: f64| {
                let mut hy = hypers;
                match (kernel, k) {
                    (_, 0) => hy.outputscale *= scale,
                    (KernelKind::Matern52, 1) => hy.lengthscale *= scale,
                    _ => hy.noise *= scale,
                }
                lml_with_gradient(kernel, &hy, inputs, y).expect("lml").0
            };
            grad_fd.push((bump(h.exp()) - bump((-h).exp())) / (2.0 * h));
        }
        let diff: f64 = grad
            .iter()
            .zip(&grad_fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
        instances += 1;
    };

    for i in 0..5 {
        let n = 12 + i;
        let x = standard_normal_matrix(&mut rng, n, 3);
        let y = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
        let hypers = GpHypers {
            outputscale: rng.random_range(0.5..2.0),
            lengthscale: rng.random_range(0.8..2.5),
            noise: rng.random_range(0.05..0.4),
        };
        check(KernelKind::Matern52, hypers, &GpInputs::Dense(x), &y);
    }
    for i in 0..5 {
        let n = 12 + i;
        let fps: Vec<Fingerprint> = (0..n)
            .map(|_| random_fingerprint(&mut rng, 256, 25))
            .collect();
        let y = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
        let hypers = GpHypers {
            outputscale: rng.random_range(0.5..2.0),
            lengthscale: 1.0,
            noise: rng.random_range(0.05..0.4),
        };
        check(KernelKind::Tanimoto, hypers, &GpInputs::Fingerprints(fps), &y);
    }

    report(
        4,
        instances == 10 && worst < 1e-4,
        &format!(
            "log-marginal-likelihood gradients vs central finite differences over \
             {instances} random instances (5 per kernel): worst relative error \
             {worst:.2e} (tolerance 1e-4)"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 5: Tanimoto kernel validity

#[test]
fn criterion_05_tanimoto_gram_matrices_are_positive_semidefinite() {
    let mut rng = ChaCha12Rng::seed_from_u64(51);
    let fps: Vec<Fingerprint> = (0..200)
        .map(|_| {
            let on_bits = rng.random_range(10..80);
            random_fingerprint(&mut rng, 1024, on_bits)
        })
        .collect();

    let mut reflexive = true;
    let gram = DMatrix::from_fn(200, 200, |i, j| {
        tanimoto(&fps[i], &fps[j]).expect("matching widths")
    });
    for fp in &fps {
        reflexive &= tanimoto(fp, fp).expect("matching widths") == 1.0;
    }
    let min_eig = gram
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);

    report(
        5,
        min_eig >= -1e-8 && reflexive,
        &format!(
            "Tanimoto Gram matrix over 200 random 1024-bit fingerprints: minimum \
             eigenvalue {min_eig:.2e} (floor -1e-8); self-similarity is exactly 1 \
             for every fingerprint: {reflexive}"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 6: fingerprint invariance to atom order

#[test]
fn criterion_06_fingerprints_are_invariant_to_atom_order() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy_pool.csv");
    let pool = CandidatePool::load_csv(&path, &[]).expect("toy pool fixture");
    let mut molecules = 0;
    let mut renderings = 0;
    let mut mismatches = 0;
    let mut rng = ChaCha12Rng::seed_from_u64(61);

    for entry in pool.entries() {
        let mol = parse_smiles(&entry.smiles).expect("fixture SMILES parses");
        let reference = morgan_fingerprint(&mol, 2, 1024).expect("fingerprint");
        molecules += 1;
        let mut order: Vec<usize> = (0..mol.atom_count()).collect();
        for _ in 0..10 {
            order.shuffle(&mut rng);
            let rewritten = write_smiles(&mol, &order);
            let reparsed = parse_smiles(&rewritten)
                .unwrap_or_else(|e| panic!("rewritten form {rewritten:?} failed: {e}"));
            let fp = morgan_fingerprint(&reparsed, 2, 1024).expect("fingerprint");
            renderings += 1;
            if fp != reference {
                mismatches += 1;
            }
        }
    }

    report(
        6,
        molecules >= 50 && mismatches == 0,
        &format!(
            "circular fingerprints across {molecules} molecules x 10 random \
             atom-order renderings each: {mismatches} of {renderings} differ from \
             the reference bit pattern (requirement: 0)"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 7: Thompson pick frequencies vs a Monte-Carlo oracle

#[test]
fn criterion_07_thompson_pick_frequencies_match_monte_carlo() {
    let means = [0.0, 0.35, 0.6];
    let sds = [0.8, 0.5, 0.3];
    let post = PosteriorPredictive::new(
        DMatrix::from_column_slice(3, 1, &means),
        DMatrix::from_column_slice(3, 1, &[sds[0] * sds[0], sds[1] * sds[1], sds[2] * sds[2]]),
        None,
    )
    .expect("posterior");

    let ts_draws = 10_000;
    let mut ts_counts = [0usize; 3];
    for seed in 0..ts_draws {
        let pick = thompson_sample(&post, seed as u64).expect("thompson draw");
        ts_counts[pick.index] += 1;
    }

    let mc_draws = 1_000_000;
    let mut mc_counts = [0usize; 3];
    let mut rng = ChaCha12Rng::seed_from_u64(71);
    for _ in 0..mc_draws {
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for i in 0..3 {
            let v = means[i] + sds[i] * rng.sample::<f64, _>(StandardNormal);
            if v > best_val {
                best_val = v;
                best = i;
            }
        }
        mc_counts[best] += 1;
    }

    let mut worst: f64 = 0.0;
    let mut freqs = String::new();
    for i in 0..3 {
        let ts = ts_counts[i] as f64 / ts_draws as f64;
        let mc = mc_counts[i] as f64 / mc_draws as f64;
        worst = worst.max((ts - mc).abs());
        freqs.push_str(&format!("{ts:.3}/{mc:.3} "));
    }

    report(
        7,
        worst <= 0.02,
        &format!(
            "Thompson pick frequencies over 1e4 draws vs 1e6-draw Monte-Carlo \
             argmax probabilities (sampler/oracle): {freqs}- worst gap {worst:.4} \
             (tolerance 0.02)"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 8: hypervolume vs Monte Carlo and an exact case

#[test]
fn criterion_08_hypervolume_matches_monte_carlo_and_the_exact_case() {
    let exact = hypervolume(&[vec![1.0, 2.0], vec![2.0, 1.0]], &[0.0, 0.0]).expect("hv");

    let mut rng = ChaCha12Rng::seed_from_u64(81);
    let points: Vec<Vec<f64>> = (0..20)
        .map(|_| vec![rng.random_range(0.05..1.0), rng.random_range(0.05..1.0)])
        .collect();
    let hv = hypervolume(&points, &[0.0, 0.0]).expect("hv");

    let samples = 10_000_000usize;
    let mut dominated = 0usize;
    for _ in 0..samples {
        let u = rng.random_range(0.0..1.0);
        let v = rng.random_range(0.0..1.0);
        if points.iter().any(|p| u <= p[0] && v <= p[1]) {
            dominated += 1;
        }
    }
    let estimate = dominated as f64 / samples as f64;
    let rel = (hv - estimate).abs() / estimate;

    report(
        8,
        exact == 3.0 && rel <= 0.01,
        &format!(
            "hypervolume of {{(1,2),(2,1)}} vs (0,0) = {exact} (exact 3); 20-point \
             random front {hv:.5} vs 1e7-sample Monte Carlo {estimate:.5}, relative \
             gap {rel:.4} (tolerance 0.01)"
        ),
    );
}

// ---------------------------------------------------------------------------
// shared campaign batches (criteria 9, 10, 11, 12)

const SYNTH_SEEDS: u64 = 20;
const SYNTH_M: usize = 10;
const SYNTH_T: usize = 30;

/// Surrogate-vs-random margins measured once on this synthetic pool with the
/// exact seeds and budgets below, then frozen (with 0.03 slack for numeric
/// drift across toolchains) as the regression floor. The headline claim only
/// needs 0.15.
const GP_TS_MARGIN_FLOOR: f64 = 0.15;
const LA_TS_MARGIN_FLOOR: f64 = 0.15;

struct SynthBatch {
    pool: CandidatePool,
    random: ReplicateSet,
    gp_ts: ReplicateSet,
    gp_ei: ReplicateSet,
    la_ts: ReplicateSet,
    elapsed: Duration,
}

static SYNTH: OnceLock<SynthBatch> = OnceLock::new();

/// 200 candidates with 8-dimensional features and a smooth tabulated
/// objective (a quadratic bowl around a hidden center), the desk-scale stand-
/// in for a real library with cached embeddings.
fn synthetic_feature_pool(n: usize, d: usize) -> CandidatePool {
    let mut rng = ChaCha12Rng::seed_from_u64(0x0901);
    let center: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut data = Vec::with_capacity(n * d);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dist2: f64 = x
            .iter()
            .zip(&center)
            .map(|(a, c)| (a - c) * (a - c))
            .sum();
        data.extend_from_slice(&x);
        entries.push(PoolEntry {
            id: format!("p{i:03}"),
            smiles: "C".to_string(),
            objectives: vec![10.0 - dist2],
        });
    }
    let mut pool = CandidatePool::from_entries(entries, vec![Direction::Maximize]).unwrap();
    pool.attach_features(FeatureMatrix::new(n, d, data)).unwrap();
    pool
}

fn synth_gp_config() -> GpConfig {
    GpConfig {
        fit_steps: 120,
        fit_lr: 0.05,
        ..GpConfig::new(KernelKind::Matern52)
    }
}

fn synth_campaign(surrogate: SurrogateSpec, acquisition: AcquisitionSpec) -> CampaignConfig {
    CampaignConfig {
        surrogate,
        representation: Representation::Features,
        acquisition,
        t_budget: SYNTH_T,
        m_init: SYNTH_M,
        seed: 0,
        joint_cap: DEFAULT_JOINT_CAP,
    }
}

fn synth_batch() -> &'static SynthBatch {
    SYNTH.get_or_init(|| {
        let started = Instant::now();
        let pool = synthetic_feature_pool(200, 8);
        let seeds: Vec<u64> = (0..SYNTH_SEEDS).collect();

        let random = run_random_replicates(&pool, SYNTH_M, SYNTH_T, &seeds).unwrap();
        let gp_ts = run_replicates(
            &pool,
            &synth_campaign(
                SurrogateSpec::Gp(synth_gp_config()),
                AcquisitionSpec::Thompson,
            ),
            &seeds,
        )
        .unwrap();
        let gp_ei = run_replicates(
            &pool,
            &synth_campaign(
                SurrogateSpec::Gp(synth_gp_config()),
                AcquisitionSpec::ExpectedImprovement,
            ),
            &seeds,
        )
        .unwrap();

        let mut spec = LaplaceMlpSpec::new(vec![32], Activation::Tanh);
        spec.base.train = TrainConfig {
            epochs: 150,
            ..TrainConfig::default()
        };
        spec.base.structure = CurvatureStructure::Kfac;
        spec.base.grouping = PriorGrouping::PerLayer;
        spec.base.marglik = MargLikConfig {
            iterations: 60,
            ..MargLikConfig::default()
        };
        let la_ts = run_replicates(
            &pool,
            &synth_campaign(SurrogateSpec::LaplaceMlp(spec), AcquisitionSpec::Thompson),
            &seeds,
        )
        .unwrap();

        SynthBatch {
            pool,
            random,
            gp_ts,
            gp_ei,
            la_ts,
            elapsed: started.elapsed(),
        }
    })
}

const LORA_SEEDS: u64 = 10;
const LORA_M: usize = 5;
const LORA_T: usize = 15;

struct LoraBatch {
    pool: CandidatePool,
    lora: ReplicateSet,
    random: ReplicateSet,
    rerun_seed0: CampaignTrace,
    base_hash_before: u64,
    base_hash_after: u64,
    elapsed: Duration,
}

static LORA: OnceLock<LoraBatch> = OnceLock::new();

/// 100 character strings over the tokenizer vocabulary whose tabulated score
/// is the mean of a per-character weight, so a frozen encoder's pooled
/// features carry the signal a linear head can recover.
fn char_string_pool(n: usize) -> CandidatePool {
    let alphabet = b"CNOScnos=#()123[]+-";
    fn weight(b: u8) -> f64 {
        match b {
            b'C' | b'c' => 1.0,
            b'N' | b'n' => 0.55,
            b'O' | b'o' => 0.25,
            b'S' | b's' => -0.35,
            b'=' => 0.45,
            b'#' => -0.5,
            b'(' | b')' => 0.1,
            _ => 0.0,
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(0x0b0e);
    let entries: Vec<PoolEntry> = (0..n)
        .map(|i| {
            let len = rng.random_range(10..=24);
            let s: String = (0..len)
                .map(|_| alphabet[rng.random_range(0..alphabet.len())] as char)
                .collect();
            let score = s.bytes().map(weight).sum::<f64>() / len as f64;
            PoolEntry {
                id: format!("s{i:03}"),
                smiles: s,
                objectives: vec![score],
            }
        })
        .collect();
    CandidatePool::from_entries(entries, vec![Direction::Maximize]).unwrap()
}

fn lora_batch() -> &'static LoraBatch {
    LORA.get_or_init(|| {
        let started = Instant::now();
        let pool = char_string_pool(100);
        let seeds: Vec<u64> = (0..LORA_SEEDS).collect();

        let tokenizer = SmilesTokenizer::new();
        let base = ToyTransformer::init(
            TransformerConfig {
                vocab_size: tokenizer.vocab_size(),
                embed_dim: 8,
                heads: 2,
                head_dim: 4,
                layers: 2,
            },
            7,
        )
        .unwrap();
        let base_hash_before = base.content_hash();
        let peft = PeftConfig {
            joint_epochs: 8,
            head_epochs: 40,
            marglik: MargLikConfig {
                iterations: 40,
                ..MargLikConfig::default()
            },
            ..PeftConfig::default()
        };
        let config = CampaignConfig {
            surrogate: SurrogateSpec::LoraTransformer {
                base: Box::new(base),
                peft,
            },
            representation: Representation::Tokens { max_len: 24 },
            acquisition: AcquisitionSpec::Thompson,
            t_budget: LORA_T,
            m_init: LORA_M,
            seed: 0,
            joint_cap: DEFAULT_JOINT_CAP,
        };

        let lora = run_replicates(&pool, &config, &seeds).unwrap();
        let rerun_seed0 = run_campaign(pool.clone(), &config).unwrap();
        let random = run_random_replicates(&pool, LORA_M, LORA_T, &seeds).unwrap();

        let base_hash_after = match &config.surrogate {
            SurrogateSpec::LoraTransformer { base, .. } => base.content_hash(),
            _ => unreachable!(),
        };

        LoraBatch {
            pool,
            lora,
            random,
            rerun_seed0,
            base_hash_before,
            base_hash_after,
            elapsed: started.elapsed(),
        }
    })
}

// ---------------------------------------------------------------------------
// criterion 9: surrogate campaigns dominate random search

#[test]
fn criterion_09_surrogate_campaigns_beat_random_search() {
    let batch = synth_batch();
    let all_completed = batch.random.aggregate.completed == SYNTH_SEEDS as usize
        && batch.gp_ts.aggregate.completed == SYNTH_SEEDS as usize
        && batch.la_ts.aggregate.completed == SYNTH_SEEDS as usize;
    let random_gap = batch.random.aggregate.mean_gap[SYNTH_T];
    let gp_gap = batch.gp_ts.aggregate.mean_gap[SYNTH_T];
    let la_gap = batch.la_ts.aggregate.mean_gap[SYNTH_T];
    let gp_margin = gp_gap - random_gap;
    let la_margin = la_gap - random_gap;

    report(
        9,
        all_completed
            && gp_margin > 0.15
            && la_margin > 0.15
            && gp_margin > GP_TS_MARGIN_FLOOR
            && la_margin > LA_TS_MARGIN_FLOOR
            && batch.elapsed < Duration::from_secs(120),
        &format!(
            "mean GAP at t={SYNTH_T} over {SYNTH_SEEDS} seeds on a 200-candidate \
             8-dim pool: GP-Matern+TS {gp_gap:.3}, Laplace-MLP+TS {la_gap:.3}, \
             random {random_gap:.3}; margins {gp_margin:.3}/{la_margin:.3} \
             (headline > 0.15, frozen floors {GP_TS_MARGIN_FLOOR}/{LA_TS_MARGIN_FLOOR}); \
             batch took {:.1} s (budget 120 s, shared with criterion 10)",
            batch.elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 10: Thompson sampling and expected improvement are on par

#[test]
fn criterion_10_thompson_and_expected_improvement_are_on_par() {
    let batch = synth_batch();
    let ts_gap = batch.gp_ts.aggregate.mean_gap[SYNTH_T];
    let ei_gap = batch.gp_ei.aggregate.mean_gap[SYNTH_T];
    let ts_se = batch.gp_ts.aggregate.stderr_gap[SYNTH_T];
    let ei_se = batch.gp_ei.aggregate.stderr_gap[SYNTH_T];
    let pooled = (ts_se * ts_se + ei_se * ei_se).sqrt();
    let diff = (ts_gap - ei_gap).abs();

    report(
        10,
        batch.gp_ei.aggregate.completed == SYNTH_SEEDS as usize && diff <= 2.0 * pooled,
        &format!(
            "mean GAP at t={SYNTH_T} over {SYNTH_SEEDS} seeds: Thompson {ts_gap:.3} \
             vs expected improvement {ei_gap:.3}, |difference| {diff:.4} <= 2 x \
             pooled standard error {:.4}",
            2.0 * pooled
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 11: LoRA campaigns are deterministic, freeze the base, and hold
// their own against random search

#[test]
fn criterion_11_lora_campaigns_complete_deterministically_and_beat_random() {
    let batch = lora_batch();
    let all_completed = batch.lora.traces.len() == LORA_SEEDS as usize
        && batch
            .lora
            .traces
            .iter()
            .all(|t| t.failure.is_none() && t.iterations.len() == LORA_T);

    let seed0 = &batch.lora.traces[0];
    let deterministic = seed0.selected_indices() == batch.rerun_seed0.selected_indices()
        && seed0
            .iterations
            .iter()
            .zip(&batch.rerun_seed0.iterations)
            .all(|(a, b)| a.incumbent == b.incumbent && a.score_digest == b.score_digest);

    let base_frozen = batch.base_hash_before == batch.base_hash_after;
    let lora_gap = batch.lora.aggregate.mean_gap[LORA_T];
    let random_gap = batch.random.aggregate.mean_gap[LORA_T];

    report(
        11,
        all_completed
            && deterministic
            && base_frozen
            && lora_gap >= random_gap
            && batch.elapsed < Duration::from_secs(300),
        &format!(
            "LoRA-adapter campaigns on a 100-string pool, T={LORA_T}, m={LORA_M}, \
             {LORA_SEEDS} seeds: all completed {all_completed}, seed-0 rerun \
             identical {deterministic}, base weights bit-identical {base_frozen}; \
             mean final GAP {lora_gap:.3} vs random {random_gap:.3}; batch took \
             {:.1} s (budget 300 s)",
            batch.elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 12: loop contracts hold for every campaign in the suite

fn contracts_hold(pool: &CandidatePool, trace: &CampaignTrace, m: usize, t: usize) -> bool {
    if trace.failure.is_some() || trace.initial.len() != m || trace.iterations.len() != t {
        return false;
    }
    let selected = trace.selected_indices();
    let unique: std::collections::BTreeSet<_> = selected.iter().collect();
    if unique.len() != selected.len() {
        return false;
    }
    // Replaying the selections must respect the remaining/selected partition.
    let mut replay = pool.clone();
    for &idx in &selected {
        if !replay.is_remaining(idx) || replay.mark_selected(idx).is_err() {
            return false;
        }
    }
    if replay.remaining_count() != pool.len() - selected.len() {
        return false;
    }
    let series = trace.incumbent_series(pool);
    if !series.windows(2).all(|w| w[1] >= w[0]) {
        return false;
    }
    // Observations must be exactly the tabulated objectives.
    if !trace
        .iterations
        .iter()
        .all(|r| r.objectives == pool.entry(r.index).objectives && r.id == pool.entry(r.index).id)
    {
        return false;
    }
    let best = selected
        .iter()
        .map(|&i| scalarize(&pool.internal_objectives(i)))
        .fold(f64::NEG_INFINITY, f64::max);
    scalarize(&pool.internal_objectives(trace.best_index)) == best
}

#[test]
fn criterion_12_loop_contracts_hold_for_every_campaign() {
    let synth = synth_batch();
    let lora = lora_batch();
    let mut campaigns = 0;
    let mut violations = 0;

    let mut check_set = |pool: &CandidatePool, set: &ReplicateSet, m: usize, t: usize| {
        for trace in &set.traces {
            campaigns += 1;
            if !contracts_hold(pool, trace, m, t) {
                violations += 1;
            }
        }
    };
    check_set(&synth.pool, &synth.random, SYNTH_M, SYNTH_T);
    check_set(&synth.pool, &synth.gp_ts, SYNTH_M, SYNTH_T);
    check_set(&synth.pool, &synth.gp_ei, SYNTH_M, SYNTH_T);
    check_set(&synth.pool, &synth.la_ts, SYNTH_M, SYNTH_T);
    check_set(&lora.pool, &lora.lora, LORA_M, LORA_T);
    check_set(&lora.pool, &lora.random, LORA_M, LORA_T);
    campaigns += 1;
    if !contracts_hold(&lora.pool, &lora.rerun_seed0, LORA_M, LORA_T) {
        violations += 1;
    }

    report(
        12,
        campaigns == 101 && violations == 0,
        &format!(
            "pool partition, no-reselection, monotone-incumbent, and tabulated-\
             observation contracts over all {campaigns} campaigns in this suite: \
             {violations} violation(s)"
        ),
    );
}
