//! Low-rank-adapter surrogate on top of the frozen toy transformer.
//!
//! The base encoder stays untouched; trainable state is a set of rank-`Z`
//! adapters on selected attention projections plus a linear regression head
//! on the pooled features. After MAP training (joint phase, then a head-only
//! refinement on cached features) a KFAC Gauss-Newton Laplace approximation
//! around the adapter/head parameters yields calibrated predictive
//! uncertainty. Posteriors serialize without base weights: only the MAP
//! parameters, curvature factors, and a content hash of the frozen encoder.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::hashing::derive_seed;
use crate::opt::{Adam, AdamConfig};
use crate::surrogate::curvature::{
    CurvatureModel, FitStats, GgnAccumulator, KfacLayerShape, MargLikConfig, MargLikReport,
    tune_marginal_likelihood,
};
use crate::surrogate::mlp::LayerSite;
use crate::surrogate::transformer::{LowRankAdapter, Proj, ToyTransformer};
use crate::surrogate::{PosteriorPredictive, SurrogateError};

/// Adapter placement and shape. Defaults follow the desk-scale recipe:
/// rank 4, scaling 16 (applied as `alpha / rank`), 10% dropout on the
/// adapter-path input at training time, adapters on the key and value
/// projections of every attention head.
#[derive(Debug, Clone)]
pub struct LoraConfig {
    /// Adapter rank `Z`.
    pub rank: usize,
    /// Numerator of the `alpha / rank` output scaling.
    pub alpha: f64,
    /// Train-time dropout probability on the adapter-path input.
    pub dropout: f64,
    /// Projections that receive adapters (every layer, every head).
    pub targets: Vec<Proj>,
    /// Standard deviation of the Gaussian init for the `A` matrices.
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 16.0,
            dropout: 0.1,
            targets: vec![Proj::K, Proj::V],
            init_std: 0.02,
        }
    }
}

/// Full PEFT fitting recipe: joint adapter+head phase followed by a
/// head-only refinement on cached pooled features, then a KFAC Laplace
/// approximation with evidence-tuned layerwise prior precisions.
#[derive(Debug, Clone)]
pub struct PeftConfig {
    pub lora: LoraConfig,
    /// Epochs of joint adapter+head training.
    pub joint_epochs: usize,
    /// Epochs of head-only refinement on cached pooled features.
    pub head_epochs: usize,
    pub batch_size: usize,
    pub adapter_lr: f64,
    pub head_lr: f64,
    /// Decoupled weight decay applied to adapters and head.
    pub weight_decay: f64,
    /// Initial observation-noise variance for the Laplace stage.
    pub sigma2_init: f64,
    /// Initial prior precision for every parameter block.
    pub lambda_init: f64,
    /// Tune layerwise precisions and noise by marginal likelihood.
    pub tune: bool,
    pub marglik: MargLikConfig,
}

impl Default for PeftConfig {
    fn default() -> Self {
        Self {
            lora: LoraConfig::default(),
            joint_epochs: 50,
            head_epochs: 100,
            batch_size: 16,
            adapter_lr: 3e-4,
            head_lr: 1e-3,
            weight_decay: 0.01,
            sigma2_init: 0.1,
            lambda_init: 1.0,
            tune: true,
            marglik: MargLikConfig {
                iterations: 200,
                ..MargLikConfig::default()
            },
        }
    }
}

/// Effective weight of an adapted projection: `W* + (alpha / Z) * B^T A`.
/// With `B = 0` this is exactly the frozen base weight.
pub fn apply_lora(base: &DMatrix<f64>, adapter: &LowRankAdapter) -> DMatrix<f64> {
    base + adapter.b.transpose() * &adapter.a * adapter.scale
}

/// Freshly initialized adapters for every (layer, head, target projection):
/// `A` entries Gaussian, `B` zero so the adapted model starts exactly at the
/// base model.
pub fn init_adapters(
    base: &ToyTransformer,
    cfg: &LoraConfig,
    seed: u64,
) -> Result<Vec<LowRankAdapter>, SurrogateError> {
    if cfg.rank == 0 {
        return Err(SurrogateError::BadHyper {
            name: "rank",
            value: 0.0,
            constraint: "must be positive",
        });
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(SurrogateError::BadHyper {
            name: "dropout",
            value: cfg.dropout,
            constraint: "must lie in [0, 1)",
        });
    }
    let tc = base.config();
    let scale = cfg.alpha / cfg.rank as f64;
    let mut adapters = Vec::new();
    let mut idx = 0u64;
    for layer in 0..tc.layers {
        for head in 0..tc.heads {
            for &proj in &cfg.targets {
                let mut rng: ChaCha12Rng =
                    rand::SeedableRng::seed_from_u64(derive_seed(seed, "adapter-init", idx));
                let a = DMatrix::from_fn(cfg.rank, tc.embed_dim, |_, _| {
                    let z: f64 = rng.sample(StandardNormal);
                    z * cfg.init_std
                });
                let b = DMatrix::zeros(cfg.rank, tc.head_dim);
                adapters.push(LowRankAdapter {
                    layer,
                    head,
                    proj,
                    a,
                    b,
                    scale,
                });
                idx += 1;
            }
        }
    }
    Ok(adapters)
}

/// Flat layout of the trainable parameters: for each adapter `A` row-major
/// then `B` row-major, followed by the head weights with the bias last.
fn flatten_params(adapters: &[LowRankAdapter], head: &DVector<f64>) -> DVector<f64> {
    let n_adapter: usize = adapters
        .iter()
        .map(|ad| ad.a.len() + ad.b.len())
        .sum::<usize>();
    let mut flat = DVector::zeros(n_adapter + head.len());
    let mut at = 0;
    for ad in adapters {
        for r in 0..ad.a.nrows() {
            for c in 0..ad.a.ncols() {
                flat[at] = ad.a[(r, c)];
                at += 1;
            }
        }
        for r in 0..ad.b.nrows() {
            for c in 0..ad.b.ncols() {
                flat[at] = ad.b[(r, c)];
                at += 1;
            }
        }
    }
    flat.rows_mut(at, head.len()).copy_from(head);
    flat
}

fn unflatten_params(flat: &DVector<f64>, adapters: &mut [LowRankAdapter], head: &mut DVector<f64>) {
    let mut at = 0;
    for ad in adapters.iter_mut() {
        for r in 0..ad.a.nrows() {
            for c in 0..ad.a.ncols() {
                ad.a[(r, c)] = flat[at];
                at += 1;
            }
        }
        for r in 0..ad.b.nrows() {
            for c in 0..ad.b.ncols() {
                ad.b[(r, c)] = flat[at];
                at += 1;
            }
        }
    }
    head.copy_from(&flat.rows(at, head.len()).into_owned());
}

/// KFAC block layout matching [`flatten_params`]: two blocks per adapter
/// (`A` is rank-by-embed, `B` rank-by-head-dim) plus one exact block for the
/// linear head.
fn kfac_shapes(adapters: &[LowRankAdapter], head_len: usize) -> Vec<KfacLayerShape> {
    let mut shapes = Vec::with_capacity(2 * adapters.len() + 1);
    let mut at = 0;
    for ad in adapters {
        shapes.push(KfacLayerShape {
            range: at..at + ad.a.len(),
            rows: ad.a.nrows(),
            cols: ad.a.ncols(),
        });
        at += ad.a.len();
        shapes.push(KfacLayerShape {
            range: at..at + ad.b.len(),
            rows: ad.b.nrows(),
            cols: ad.b.ncols(),
        });
        at += ad.b.len();
    }
    shapes.push(KfacLayerShape {
        range: at..at + head_len,
        rows: 1,
        cols: head_len,
    });
    shapes
}

/// Mean squared prediction error with adapters active and dropout off.
fn eval_mse(
    base: &ToyTransformer,
    adapters: &[LowRankAdapter],
    head: &DVector<f64>,
    tokens: &[Vec<u32>],
    y: &DVector<f64>,
) -> Result<f64, SurrogateError> {
    let mut sse = 0.0;
    for (i, toks) in tokens.iter().enumerate() {
        let pooled = encode_pooled(base, adapters, toks)?;
        let pred = head_predict(head, &pooled);
        sse += (pred - y[i]).powi(2);
    }
    Ok(sse / tokens.len() as f64)
}

fn head_predict(head: &DVector<f64>, pooled: &DVector<f64>) -> f64 {
    let n = pooled.len();
    head.rows(0, n).dot(pooled) + head[n]
}

fn encode_pooled(
    base: &ToyTransformer,
    adapters: &[LowRankAdapter],
    tokens: &[u32],
) -> Result<DVector<f64>, SurrogateError> {
    Ok(base.encode(tokens, adapters, None)?.pooled)
}

/// Independent 0-or-`1/(1-p)` dropout masks for every adapter, one row per
/// token position.
fn sample_dropout_masks(
    adapters: &[LowRankAdapter],
    seq_len: usize,
    embed_dim: usize,
    p: f64,
    rng: &mut ChaCha12Rng,
) -> Vec<DMatrix<f64>> {
    let keep = 1.0 / (1.0 - p);
    adapters
        .iter()
        .map(|_| {
            DMatrix::from_fn(seq_len, embed_dim, |_, _| {
                if rng.random::<f64>() < p { 0.0 } else { keep }
            })
        })
        .collect()
}

/// Loss and gradients of the mean squared error over one batch. Adapter
/// gradients come back in flat layout; the head gradient carries the bias in
/// its last slot. Dropout masks, when given, are per sample then per adapter.
#[allow(clippy::too_many_arguments)]
fn batch_loss_grads(
    base: &ToyTransformer,
    adapters: &[LowRankAdapter],
    head: &DVector<f64>,
    tokens: &[Vec<u32>],
    y: &[f64],
    batch: &[usize],
    masks: Option<&[Vec<DMatrix<f64>>]>,
    adapter_grad: &mut DVector<f64>,
    head_grad: &mut DVector<f64>,
) -> Result<f64, SurrogateError> {
    let embed = base.config().embed_dim;
    adapter_grad.fill(0.0);
    head_grad.fill(0.0);
    let mut loss = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for (bi, &i) in batch.iter().enumerate() {
        let sample_masks = masks.map(|m| m[bi].as_slice());
        let cache = base.encode(&tokens[i], adapters, sample_masks)?;
        let pred = head_predict(head, &cache.pooled);
        let resid = pred - y[i];
        loss += resid * resid * inv;
        let dy = 2.0 * resid * inv;
        // Head gradient: d loss / d (w, b) = dy * (pooled, 1).
        for j in 0..embed {
            head_grad[j] += dy * cache.pooled[j];
        }
        head_grad[embed] += dy;
        // Adapter gradients flow through the encoder.
        let d_pooled = head.rows(0, embed) * dy;
        let grads =
            base.backprop_pooled(&cache, adapters, sample_masks, &d_pooled.into_owned(), false)?;
        let mut at = 0;
        for (da, db) in &grads.adapters {
            for r in 0..da.nrows() {
                for c in 0..da.ncols() {
                    adapter_grad[at] += da[(r, c)];
                    at += 1;
                }
            }
            for r in 0..db.nrows() {
                for c in 0..db.ncols() {
                    adapter_grad[at] += db[(r, c)];
                    at += 1;
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(SurrogateError::NonFinite {
            what: "training loss".to_string(),
            where_: "adapter training".to_string(),
        });
    }
    Ok(loss)
}

/// Progress of one training phase: full-data mean squared error before the
/// first step and at the accepted (best) parameters.
#[derive(Debug, Clone, Copy)]
pub struct PhaseReport {
    pub initial_mse: f64,
    pub final_mse: f64,
}

/// MAP-trained adapters and head with a Laplace approximation around them.
/// Borrows the frozen base encoder; never mutates it.
pub struct PeftFit<'a> {
    base: &'a ToyTransformer,
    adapters: Vec<LowRankAdapter>,
    head: DVector<f64>,
    curvature: CurvatureModel,
    stats: FitStats,
    raw_blocks: Vec<(KfacLayerShape, DMatrix<f64>, DMatrix<f64>, f64)>,
    base_hash: u64,
    pub joint: PhaseReport,
    pub head_phase: PhaseReport,
    pub evidence: Option<MargLikReport>,
}

/// Joint adapter+head MAP training followed by head-only refinement.
/// Returns the trained state plus phase reports; the Laplace stage lives in
/// [`fit_peft`].
#[allow(clippy::type_complexity)]
fn train_peft_map(
    base: &ToyTransformer,
    cfg: &PeftConfig,
    tokens: &[Vec<u32>],
    y: &DVector<f64>,
    seed: u64,
) -> Result<(Vec<LowRankAdapter>, DVector<f64>, PhaseReport, PhaseReport), SurrogateError> {
    let n = tokens.len();
    if n == 0 {
        return Err(SurrogateError::NoTrainingData);
    }
    if y.len() != n {
        return Err(SurrogateError::RowMismatch {
            inputs: n,
            targets: y.len(),
        });
    }
    if cfg.batch_size == 0 {
        return Err(SurrogateError::BadHyper {
            name: "batch_size",
            value: 0.0,
            constraint: "must be positive",
        });
    }
    let embed = base.config().embed_dim;
    let mut adapters = init_adapters(base, &cfg.lora, derive_seed(seed, "adapter-init", 0))?;
    let mut head = DVector::zeros(embed + 1);
    let ys: Vec<f64> = y.iter().copied().collect();

    // Joint phase: adapters and head under separate learning rates, shared
    // decoupled weight decay, fresh dropout masks every forward pass.
    let adapter_dim: usize = adapters.iter().map(|ad| ad.a.len() + ad.b.len()).sum();
    let mut adapter_opt = Adam::new(
        AdamConfig::with_weight_decay(cfg.adapter_lr, cfg.weight_decay),
        adapter_dim,
    );
    let mut head_opt = Adam::new(
        AdamConfig::with_weight_decay(cfg.head_lr, cfg.weight_decay),
        embed + 1,
    );
    let mut adapter_grad = DVector::zeros(adapter_dim);
    let mut head_grad = DVector::zeros(embed + 1);
    let mut dropout_rng: ChaCha12Rng =
        rand::SeedableRng::seed_from_u64(derive_seed(seed, "dropout", 0));

    let initial_joint = eval_mse(base, &adapters, &head, tokens, y)?;
    let mut best_joint = initial_joint;
    let mut best_state = (adapters.clone(), head.clone());
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.joint_epochs {
        let mut rng: ChaCha12Rng =
            rand::SeedableRng::seed_from_u64(derive_seed(seed, "epoch", epoch as u64));
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let masks: Option<Vec<Vec<DMatrix<f64>>>> = if cfg.lora.dropout > 0.0 {
                Some(
                    batch
                        .iter()
                        .map(|&i| {
                            sample_dropout_masks(
                                &adapters,
                                tokens[i].len(),
                                embed,
                                cfg.lora.dropout,
                                &mut dropout_rng,
                            )
                        })
                        .collect(),
                )
            } else {
                None
            };
            let mut flat_adapters = flatten_params(&adapters, &DVector::zeros(0));
            batch_loss_grads(
                base,
                &adapters,
                &head,
                tokens,
                &ys,
                batch,
                masks.as_deref(),
                &mut adapter_grad,
                &mut head_grad,
            )?;
            adapter_opt.step(&mut flat_adapters, &adapter_grad, 1.0);
            head_opt.step(&mut head, &head_grad, 1.0);
            let mut empty = DVector::zeros(0);
            unflatten_params(&flat_adapters, &mut adapters, &mut empty);
        }
        let mse = eval_mse(base, &adapters, &head, tokens, y)?;
        if mse < best_joint {
            best_joint = mse;
            best_state = (adapters.clone(), head.clone());
        }
    }
    adapters = best_state.0;
    head = best_state.1;
    let joint = PhaseReport {
        initial_mse: initial_joint,
        final_mse: best_joint,
    };

    // Head-only refinement: adapters frozen, so pooled features are fixed
    // and cached once; dropout is off.
    let pooled: Vec<DVector<f64>> = tokens
        .iter()
        .map(|t| encode_pooled(base, &adapters, t))
        .collect::<Result<_, _>>()?;
    let head_mse = |h: &DVector<f64>| -> f64 {
        pooled
            .iter()
            .zip(&ys)
            .map(|(p, &t)| (head_predict(h, p) - t).powi(2))
            .sum::<f64>()
            / n as f64
    };
    let mut head_opt = Adam::new(
        AdamConfig::with_weight_decay(cfg.head_lr, cfg.weight_decay),
        embed + 1,
    );
    let initial_head = head_mse(&head);
    let mut best_head_mse = initial_head;
    let mut best_head = head.clone();
    for epoch in 0..cfg.head_epochs {
        let mut rng: ChaCha12Rng =
            rand::SeedableRng::seed_from_u64(derive_seed(seed, "head-epoch", epoch as u64));
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            head_grad.fill(0.0);
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let resid = head_predict(&head, &pooled[i]) - ys[i];
                let dy = 2.0 * resid * inv;
                for j in 0..embed {
                    head_grad[j] += dy * pooled[i][j];
                }
                head_grad[embed] += dy;
            }
            head_opt.step(&mut head, &head_grad, 1.0);
        }
        let mse = head_mse(&head);
        if mse < best_head_mse {
            best_head_mse = mse;
            best_head = head.clone();
        }
    }
    head = best_head;
    let head_phase = PhaseReport {
        initial_mse: initial_head,
        final_mse: best_head_mse,
    };
    if head.iter().any(|v| !v.is_finite()) {
        return Err(SurrogateError::NonFinite {
            what: "head parameters".to_string(),
            where_: "adapter training".to_string(),
        });
    }
    Ok((adapters, head, joint, head_phase))
}

/// Fit the PEFT surrogate: MAP training, KFAC Gauss-Newton curvature over
/// the adapter and head parameters only, and (optionally) evidence-tuned
/// layerwise prior precisions and noise. The base encoder is read-only
/// throughout; its content hash is recorded for the conditioning contract.
pub fn fit_peft<'a>(
    base: &'a ToyTransformer,
    cfg: &PeftConfig,
    tokens: &[Vec<u32>],
    y: &DVector<f64>,
    seed: u64,
) -> Result<PeftFit<'a>, SurrogateError> {
    let (adapters, head, joint, head_phase) = train_peft_map(base, cfg, tokens, y, seed)?;
    let embed = base.config().embed_dim;
    let n = tokens.len();

    // Gauss-Newton factors at the MAP point, dropout off. Adapter blocks
    // collect one contribution per non-pad position (weight sharing); the
    // head block is exact with one contribution per sample.
    let shapes = kfac_shapes(&adapters, embed + 1);
    let groups: Vec<std::ops::Range<usize>> = shapes.iter().map(|s| s.range.clone()).collect();
    let param_count = groups.last().map_or(0, |g| g.end);
    let mut acc = GgnAccumulator::kfac(shapes, param_count)?;
    let head_block = 2 * adapters.len();
    let w = head.rows(0, embed).into_owned();
    let mut sse = 0.0;
    for (i, toks) in tokens.iter().enumerate() {
        let cache = base.encode(toks, &adapters, None)?;
        let resid = head_predict(&head, &cache.pooled) - y[i];
        sse += resid * resid;
        let grads = base.backprop_pooled(&cache, &adapters, None, &w, true)?;
        let sites = grads.sites.expect("sites requested");
        for (k, seq) in sites.iter().enumerate() {
            for site in &seq.a_sites {
                acc.add_block_site(2 * k, site)?;
            }
            for site in &seq.b_sites {
                acc.add_block_site(2 * k + 1, site)?;
            }
        }
        let mut head_a = DVector::zeros(embed + 1);
        head_a.rows_mut(0, embed).copy_from(&cache.pooled);
        head_a[embed] = 1.0;
        acc.add_block_site(
            head_block,
            &LayerSite {
                a: head_a,
                s: DMatrix::identity(1, 1),
            },
        )?;
    }
    let raw_blocks = acc.kfac_raw().expect("kfac accumulator");
    let lambda = vec![cfg.lambda_init; groups.len()];
    let mut curvature = acc.finalize(cfg.sigma2_init, groups, lambda)?;
    let stats = FitStats { n_obs: n, sse };

    let theta = flatten_params(&adapters, &head);
    let evidence = if cfg.tune {
        Some(tune_marginal_likelihood(
            &mut curvature,
            &theta,
            &stats,
            &cfg.marglik,
        )?)
    } else {
        None
    };

    Ok(PeftFit {
        base,
        adapters,
        head,
        curvature,
        stats,
        raw_blocks,
        base_hash: base.content_hash(),
        joint,
        head_phase,
        evidence,
    })
}

impl PeftFit<'_> {
    pub fn adapters(&self) -> &[LowRankAdapter] {
        &self.adapters
    }

    pub fn head(&self) -> &DVector<f64> {
        &self.head
    }

    pub fn curvature(&self) -> &CurvatureModel {
        &self.curvature
    }

    pub fn stats(&self) -> &FitStats {
        &self.stats
    }

    pub fn base_hash(&self) -> u64 {
        self.base_hash
    }

    /// Flat MAP parameters (adapters then head, bias last).
    pub fn theta(&self) -> DVector<f64> {
        flatten_params(&self.adapters, &self.head)
    }

    /// Linearized predictive distribution over token sequences: mean from
    /// the adapted forward pass, variance from the parameter posterior
    /// propagated through the Jacobian with respect to adapter and head
    /// parameters. `include_noise` adds the observation noise; `want_cov`
    /// also returns the joint covariance across candidates.
    pub fn predict(
        &self,
        tokens: &[Vec<u32>],
        include_noise: bool,
        want_cov: bool,
    ) -> Result<PosteriorPredictive, SurrogateError> {
        let n = tokens.len();
        if n == 0 {
            return Err(SurrogateError::NoTrainingData);
        }
        let embed = self.base.config().embed_dim;
        let p = self.curvature.param_count();
        let w = self.head.rows(0, embed).into_owned();
        let mut means = DMatrix::zeros(n, 1);
        let mut jac = DMatrix::zeros(n, p);
        for (i, toks) in tokens.iter().enumerate() {
            let cache = self.base.encode(toks, &self.adapters, None)?;
            means[(i, 0)] = head_predict(&self.head, &cache.pooled);
            let grads = self
                .base
                .backprop_pooled(&cache, &self.adapters, None, &w, false)?;
            let mut at = 0;
            for (da, db) in &grads.adapters {
                for r in 0..da.nrows() {
                    for c in 0..da.ncols() {
                        jac[(i, at)] = da[(r, c)];
                        at += 1;
                    }
                }
                for r in 0..db.nrows() {
                    for c in 0..db.ncols() {
                        jac[(i, at)] = db[(r, c)];
                        at += 1;
                    }
                }
            }
            for j in 0..embed {
                jac[(i, at + j)] = cache.pooled[j];
            }
            jac[(i, at + embed)] = 1.0;
        }
        let mut cov = self.curvature.quad_form(&jac)?;
        if include_noise {
            for i in 0..n {
                cov[(i, i)] += self.curvature.sigma2;
            }
        }
        let variances = DMatrix::from_fn(n, 1, |i, _| cov[(i, i)]);
        let covariances = want_cov.then(|| vec![cov]);
        PosteriorPredictive::new(means, variances, covariances)
    }

    /// Portable posterior: MAP parameters, raw curvature factors, tuned
    /// hyperparameters, and the base-encoder content hash. Base weights are
    /// never included.
    pub fn posterior(&self) -> PeftPosterior {
        let blocks = self
            .raw_blocks
            .iter()
            .map(|(shape, row, col, count)| RawBlock {
                start: shape.range.start,
                rows: shape.rows,
                cols: shape.cols,
                row_factor: row.as_slice().to_vec(),
                col_factor: col.as_slice().to_vec(),
                count: *count,
            })
            .collect();
        PeftPosterior {
            base_hash: self.base_hash,
            rank: self.adapters.first().map_or(0, |ad| ad.a.nrows()),
            scale: self.adapters.first().map_or(1.0, |ad| ad.scale),
            adapters: self
                .adapters
                .iter()
                .map(|ad| AdapterSpec {
                    layer: ad.layer,
                    head: ad.head,
                    proj: proj_tag(ad.proj),
                })
                .collect(),
            theta: self.theta().as_slice().to_vec(),
            sigma2: self.curvature.sigma2,
            lambda: self.curvature.lambda.clone(),
            blocks,
            n_obs: self.stats.n_obs,
            sse: self.stats.sse,
        }
    }
}

fn proj_tag(p: Proj) -> char {
    match p {
        Proj::Q => 'q',
        Proj::K => 'k',
        Proj::V => 'v',
    }
}

fn proj_from_tag(c: char) -> Result<Proj, SurrogateError> {
    match c {
        'q' => Ok(Proj::Q),
        'k' => Ok(Proj::K),
        'v' => Ok(Proj::V),
        other => Err(SurrogateError::Invalid(format!(
            "unknown projection tag {other:?}"
        ))),
    }
}

/// Placement of one serialized adapter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub layer: usize,
    pub head: usize,
    pub proj: char,
}

/// Raw Kronecker factor sums for one parameter block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawBlock {
    pub start: usize,
    pub rows: usize,
    pub cols: usize,
    /// Column-major `rows x rows` gradient-side factor.
    pub row_factor: Vec<f64>,
    /// Column-major `cols x cols` activation-side factor.
    pub col_factor: Vec<f64>,
    pub count: f64,
}

/// Serializable PEFT posterior. Holds the MAP parameters, the curvature in
/// raw-factor form, the tuned noise and prior precisions, and a content hash
/// of the frozen base encoder it was conditioned on — never base weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeftPosterior {
    pub base_hash: u64,
    pub rank: usize,
    pub scale: f64,
    pub adapters: Vec<AdapterSpec>,
    pub theta: Vec<f64>,
    pub sigma2: f64,
    pub lambda: Vec<f64>,
    pub blocks: Vec<RawBlock>,
    pub n_obs: usize,
    pub sse: f64,
}

/// Rebuild a usable fit from a serialized posterior. Fails if the supplied
/// base encoder does not hash to the value the posterior was conditioned on.
pub fn restore_peft<'a>(
    base: &'a ToyTransformer,
    post: &PeftPosterior,
) -> Result<PeftFit<'a>, SurrogateError> {
    if base.content_hash() != post.base_hash {
        return Err(SurrogateError::Invalid(format!(
            "base encoder hash {:#018x} does not match the posterior's {:#018x}",
            base.content_hash(),
            post.base_hash
        )));
    }
    let tc = base.config();
    let mut adapters = Vec::with_capacity(post.adapters.len());
    for spec in &post.adapters {
        if spec.layer >= tc.layers || spec.head >= tc.heads {
            return Err(SurrogateError::Invalid(format!(
                "adapter placement (layer {}, head {}) outside the encoder",
                spec.layer, spec.head
            )));
        }
        adapters.push(LowRankAdapter {
            layer: spec.layer,
            head: spec.head,
            proj: proj_from_tag(spec.proj)?,
            a: DMatrix::zeros(post.rank, tc.embed_dim),
            b: DMatrix::zeros(post.rank, tc.head_dim),
            scale: post.scale,
        });
    }
    let mut head = DVector::zeros(tc.embed_dim + 1);
    let adapter_dim: usize = adapters.iter().map(|ad| ad.a.len() + ad.b.len()).sum();
    if post.theta.len() != adapter_dim + head.len() {
        return Err(SurrogateError::DimensionMismatch {
            expected: adapter_dim + head.len(),
            found: post.theta.len(),
        });
    }
    let theta = DVector::from_vec(post.theta.clone());
    unflatten_params(&theta, &mut adapters, &mut head);

    let shapes = kfac_shapes(&adapters, head.len());
    if post.blocks.len() != shapes.len() {
        return Err(SurrogateError::Invalid(format!(
            "posterior stores {} curvature blocks, expected {}",
            post.blocks.len(),
            shapes.len()
        )));
    }
    let mut raw_blocks = Vec::with_capacity(shapes.len());
    for (shape, block) in shapes.iter().zip(&post.blocks) {
        if block.start != shape.range.start || block.rows != shape.rows || block.cols != shape.cols
        {
            return Err(SurrogateError::Invalid(
                "curvature block layout does not match the adapter configuration".to_string(),
            ));
        }
        if block.row_factor.len() != shape.rows * shape.rows
            || block.col_factor.len() != shape.cols * shape.cols
        {
            return Err(SurrogateError::Invalid(
                "curvature factor sizes do not match their declared shape".to_string(),
            ));
        }
        raw_blocks.push((
            shape.clone(),
            DMatrix::from_column_slice(shape.rows, shape.rows, &block.row_factor),
            DMatrix::from_column_slice(shape.cols, shape.cols, &block.col_factor),
            block.count,
        ));
    }
    let groups: Vec<std::ops::Range<usize>> = shapes.iter().map(|s| s.range.clone()).collect();
    let param_count = theta.len();
    let acc = GgnAccumulator::kfac_from_raw(raw_blocks.clone(), param_count)?;
    let curvature = acc.finalize(post.sigma2, groups, post.lambda.clone())?;
    Ok(PeftFit {
        base,
        adapters,
        head,
        curvature,
        stats: FitStats {
            n_obs: post.n_obs,
            sse: post.sse,
        },
        raw_blocks,
        base_hash: post.base_hash,
        joint: PhaseReport {
            initial_mse: f64::NAN,
            final_mse: f64::NAN,
        },
        head_phase: PhaseReport {
            initial_mse: f64::NAN,
            final_mse: f64::NAN,
        },
        evidence: None,
    })
}
