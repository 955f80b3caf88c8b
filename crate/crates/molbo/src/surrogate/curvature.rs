//! Gauss-Newton curvature for Laplace posteriors: full, diagonal, and
//! Kronecker-factored representations, plus marginal-likelihood tuning of
//! prior precision and observation noise.
//!
//! Conventions. The accumulated curvature is always the *raw* Gauss-Newton
//! matrix at unit noise, G = sum_i J_i^T J_i, with J_i the per-contribution
//! output Jacobian. The observation noise enters only when the posterior
//! precision is assembled:
//!
//!   Prec = G / sigma2 + diag(lambda)
//!
//! where lambda is constant within each parameter group (one group per layer
//! for layerwise priors, a single group otherwise). Keeping G raw lets the
//! evidence tuner move sigma2 and lambda without touching the factors.
//!
//! The Kronecker representation stores, per layer, the two factor sums
//! (output-sensitivity side and input-activation side) together with the
//! number of accumulated contributions M, approximating the layer block as
//! (row_factor x col_factor) / M. This is exact for a single contribution
//! and whenever one side is constant across contributions (e.g. a linear
//! output layer, whose sensitivity is the identity), which is what the
//! conjugate-model oracle tests pin down. For weight-shared layers each
//! (sample, position) pair is accumulated as its own contribution.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::linalg::{cholesky_log_det, cholesky_with_jitter, symmetric_eigen_clamped};
use crate::opt::{cosine_scale, Adam, AdamConfig};

use super::mlp::LayerSite;
use super::SurrogateError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvatureStructure {
    Full,
    Diagonal,
    Kfac,
}

/// Relative jitter added to Kronecker factor diagonals before
/// eigendecomposition: 1e-6 * trace / size.
const KFAC_FACTOR_JITTER: f64 = 1e-6;

// ----- accumulation -------------------------------------------------------

/// Shape of one Kronecker-factored layer: its flat parameter range and the
/// (rows, cols) of its parameter matrix in row-major layout.
#[derive(Debug, Clone)]
pub struct KfacLayerShape {
    pub range: Range<usize>,
    pub rows: usize,
    pub cols: usize,
}

struct KfacAccum {
    shape: KfacLayerShape,
    row_factor: DMatrix<f64>,
    col_factor: DMatrix<f64>,
    count: f64,
}

/// Streaming accumulator for the raw Gauss-Newton matrix in the chosen
/// structure. Feed it per-contribution Jacobians (full/diagonal) or layer
/// sites (KFAC), then `finalize` into a [`CurvatureModel`].
pub struct GgnAccumulator {
    inner: AccumInner,
}

enum AccumInner {
    Full {
        ggn: DMatrix<f64>,
    },
    Diagonal {
        diag: DVector<f64>,
    },
    Kfac {
        layers: Vec<KfacAccum>,
        param_count: usize,
    },
}

impl GgnAccumulator {
    pub fn full(param_count: usize) -> Self {
        GgnAccumulator {
            inner: AccumInner::Full {
                ggn: DMatrix::zeros(param_count, param_count),
            },
        }
    }

    pub fn diagonal(param_count: usize) -> Self {
        GgnAccumulator {
            inner: AccumInner::Diagonal {
                diag: DVector::zeros(param_count),
            },
        }
    }

    pub fn kfac(shapes: Vec<KfacLayerShape>, param_count: usize) -> Result<Self, SurrogateError> {
        let mut end = 0;
        for shape in &shapes {
            if shape.range.start != end || shape.rows * shape.cols != shape.range.len() {
                return Err(SurrogateError::Invalid(
                    "KFAC layer shapes must tile the parameter vector".to_string(),
                ));
            }
            end = shape.range.end;
        }
        if end != param_count {
            return Err(SurrogateError::Invalid(format!(
                "KFAC layer shapes cover {end} of {param_count} parameters"
            )));
        }
        let layers = shapes
            .into_iter()
            .map(|shape| KfacAccum {
                row_factor: DMatrix::zeros(shape.rows, shape.rows),
                col_factor: DMatrix::zeros(shape.cols, shape.cols),
                count: 0.0,
                shape,
            })
            .collect();
        Ok(GgnAccumulator {
            inner: AccumInner::Kfac {
                layers,
                param_count,
            },
        })
    }

    /// Add one contribution given its full Jacobian (outputs x params).
    /// Valid for the full and diagonal structures.
    pub fn add_jacobian(&mut self, jac: &DMatrix<f64>) -> Result<(), SurrogateError> {
        match &mut self.inner {
            AccumInner::Full { ggn } => {
                if jac.ncols() != ggn.nrows() {
                    return Err(SurrogateError::DimensionMismatch {
                        expected: ggn.nrows(),
                        found: jac.ncols(),
                    });
                }
                *ggn += jac.transpose() * jac;
                Ok(())
            }
            AccumInner::Diagonal { diag } => {
                if jac.ncols() != diag.len() {
                    return Err(SurrogateError::DimensionMismatch {
                        expected: diag.len(),
                        found: jac.ncols(),
                    });
                }
                for k in 0..jac.nrows() {
                    for p in 0..jac.ncols() {
                        diag[p] += jac[(k, p)] * jac[(k, p)];
                    }
                }
                Ok(())
            }
            AccumInner::Kfac { .. } => Err(SurrogateError::Invalid(
                "KFAC accumulation needs layer sites, not flat Jacobians".to_string(),
            )),
        }
    }

    /// Add one contribution to a single KFAC block. Weight-shared layers use
    /// this to accumulate one contribution per (sample, position) while
    /// unshared blocks keep one per sample.
    pub fn add_block_site(&mut self, block: usize, site: &LayerSite) -> Result<(), SurrogateError> {
        match &mut self.inner {
            AccumInner::Kfac { layers, .. } => {
                let layer = layers.get_mut(block).ok_or_else(|| {
                    SurrogateError::Invalid(format!("KFAC block index {block} out of range"))
                })?;
                if site.s.ncols() != layer.shape.rows || site.a.len() != layer.shape.cols {
                    return Err(SurrogateError::Invalid(format!(
                        "site shape ({}, {}) does not match layer ({}, {})",
                        site.s.ncols(),
                        site.a.len(),
                        layer.shape.rows,
                        layer.shape.cols
                    )));
                }
                layer.row_factor += site.s.transpose() * &site.s;
                layer.col_factor += &site.a * site.a.transpose();
                layer.count += 1.0;
                Ok(())
            }
            _ => Err(SurrogateError::Invalid(
                "layer sites only accumulate into the KFAC structure".to_string(),
            )),
        }
    }

    /// Raw KFAC factor sums: (shape, row factor, col factor, count) per
    /// block. Lets callers persist the curvature and rebuild it later with
    /// [`GgnAccumulator::kfac_from_raw`].
    pub fn kfac_raw(&self) -> Option<Vec<(KfacLayerShape, DMatrix<f64>, DMatrix<f64>, f64)>> {
        match &self.inner {
            AccumInner::Kfac { layers, .. } => Some(
                layers
                    .iter()
                    .map(|l| {
                        (
                            l.shape.clone(),
                            l.row_factor.clone(),
                            l.col_factor.clone(),
                            l.count,
                        )
                    })
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Rebuild a KFAC accumulator from previously exported factor sums.
    pub fn kfac_from_raw(
        blocks: Vec<(KfacLayerShape, DMatrix<f64>, DMatrix<f64>, f64)>,
        param_count: usize,
    ) -> Result<Self, SurrogateError> {
        let shapes: Vec<KfacLayerShape> = blocks.iter().map(|(s, _, _, _)| s.clone()).collect();
        let mut acc = Self::kfac(shapes, param_count)?;
        if let AccumInner::Kfac { layers, .. } = &mut acc.inner {
            for (layer, (shape, row, col, count)) in layers.iter_mut().zip(blocks) {
                if row.nrows() != shape.rows
                    || row.ncols() != shape.rows
                    || col.nrows() != shape.cols
                    || col.ncols() != shape.cols
                    || !count.is_finite()
                    || count < 0.0
                {
                    return Err(SurrogateError::Invalid(
                        "raw KFAC factors do not match their declared shape".to_string(),
                    ));
                }
                layer.row_factor = row;
                layer.col_factor = col;
                layer.count = count;
            }
        }
        Ok(acc)
    }

    /// Add one contribution given its per-layer sites (KFAC structure).
    pub fn add_sites(&mut self, sites: &[LayerSite]) -> Result<(), SurrogateError> {
        match &mut self.inner {
            AccumInner::Kfac { layers, .. } => {
                if sites.len() != layers.len() {
                    return Err(SurrogateError::Invalid(format!(
                        "{} site(s) for {} KFAC layer(s)",
                        sites.len(),
                        layers.len()
                    )));
                }
                for (layer, site) in layers.iter_mut().zip(sites) {
                    if site.s.ncols() != layer.shape.rows || site.a.len() != layer.shape.cols {
                        return Err(SurrogateError::Invalid(format!(
                            "site shape ({}, {}) does not match layer ({}, {})",
                            site.s.ncols(),
                            site.a.len(),
                            layer.shape.rows,
                            layer.shape.cols
                        )));
                    }
                    layer.row_factor += site.s.transpose() * &site.s;
                    layer.col_factor += &site.a * site.a.transpose();
                    layer.count += 1.0;
                }
                Ok(())
            }
            _ => Err(SurrogateError::Invalid(
                "layer sites only accumulate into the KFAC structure".to_string(),
            )),
        }
    }

    /// Close the accumulator: eigendecompose what needs eigendecomposing and
    /// attach noise, prior groups, and initial precisions.
    pub fn finalize(
        self,
        sigma2: f64,
        groups: Vec<Range<usize>>,
        lambda: Vec<f64>,
    ) -> Result<CurvatureModel, SurrogateError> {
        let param_count = match &self.inner {
            AccumInner::Full { ggn } => ggn.nrows(),
            AccumInner::Diagonal { diag } => diag.len(),
            AccumInner::Kfac { param_count, .. } => *param_count,
        };
        validate_groups(&groups, param_count)?;
        if lambda.len() != groups.len() {
            return Err(SurrogateError::Invalid(format!(
                "{} prior precision(s) for {} group(s)",
                lambda.len(),
                groups.len()
            )));
        }
        check_positive("sigma2", sigma2)?;
        for &l in &lambda {
            check_positive("lambda", l)?;
        }

        let curv = match self.inner {
            AccumInner::Full { ggn } => {
                let sym = (&ggn + ggn.transpose()) * 0.5;
                let (vals, vecs) = symmetric_eigen_clamped(&sym, 0.0);
                Curvature::Full {
                    ggn: sym,
                    eig_vals: vals,
                    eig_vecs: vecs,
                }
            }
            AccumInner::Diagonal { diag } => Curvature::Diagonal {
                diag: diag.map(|v| v.max(0.0)),
            },
            AccumInner::Kfac { layers, .. } => {
                let blocks = layers
                    .into_iter()
                    .map(|layer| {
                        let damp = |m: &DMatrix<f64>| {
                            let jitter = KFAC_FACTOR_JITTER * m.trace() / m.nrows() as f64;
                            let mut d = m.clone();
                            for i in 0..d.nrows() {
                                d[(i, i)] += jitter;
                            }
                            d
                        };
                        let (row_vals, row_vecs) =
                            symmetric_eigen_clamped(&damp(&layer.row_factor), 0.0);
                        let (col_vals, col_vecs) =
                            symmetric_eigen_clamped(&damp(&layer.col_factor), 0.0);
                        KfacBlock {
                            shape: layer.shape,
                            count: layer.count.max(1.0),
                            row_vals,
                            row_vecs,
                            col_vals,
                            col_vecs,
                        }
                    })
                    .collect();
                Curvature::Kfac { blocks }
            }
        };

        let mut model = CurvatureModel {
            curv,
            sigma2,
            lambda,
            groups,
            param_count,
            block_group: Vec::new(),
        };
        model.block_group = model.map_blocks_to_groups()?;
        Ok(model)
    }
}

fn validate_groups(groups: &[Range<usize>], param_count: usize) -> Result<(), SurrogateError> {
    let mut end = 0;
    for g in groups {
        if g.start != end || g.is_empty() {
            return Err(SurrogateError::Invalid(
                "prior groups must be non-empty and tile the parameter vector".to_string(),
            ));
        }
        end = g.end;
    }
    if end != param_count {
        return Err(SurrogateError::Invalid(format!(
            "prior groups cover {end} of {param_count} parameters"
        )));
    }
    Ok(())
}

fn check_positive(name: &'static str, value: f64) -> Result<(), SurrogateError> {
    if !(value.is_finite() && value > 0.0) {
        return Err(SurrogateError::BadHyper {
            name,
            value,
            constraint: "must be finite and positive",
        });
    }
    Ok(())
}

// ----- the model ----------------------------------------------------------

/// One Kronecker-factored layer block, stored through the eigendecompositions
/// of its (damped) factor sums. The raw block eigenvalues are
/// row_vals[i] * col_vals[j] / count.
pub struct KfacBlock {
    shape: KfacLayerShape,
    count: f64,
    row_vals: DVector<f64>,
    row_vecs: DMatrix<f64>,
    col_vals: DVector<f64>,
    col_vecs: DMatrix<f64>,
}

enum Curvature {
    Full {
        ggn: DMatrix<f64>,
        eig_vals: DVector<f64>,
        eig_vecs: DMatrix<f64>,
    },
    Diagonal {
        diag: DVector<f64>,
    },
    Kfac {
        blocks: Vec<KfacBlock>,
    },
}

/// A Laplace curvature with its noise and prior precisions: everything
/// needed to evaluate the posterior covariance Sigma = Prec^-1 and the
/// quantities the evidence needs (log|Prec|, per-group traces of Sigma,
/// tr(Sigma G)).
pub struct CurvatureModel {
    curv: Curvature,
    pub sigma2: f64,
    /// Prior precision per group.
    pub lambda: Vec<f64>,
    groups: Vec<Range<usize>>,
    param_count: usize,
    /// For KFAC: the prior group index of each block.
    block_group: Vec<usize>,
}

impl CurvatureModel {
    pub fn structure(&self) -> CurvatureStructure {
        match self.curv {
            Curvature::Full { .. } => CurvatureStructure::Full,
            Curvature::Diagonal { .. } => CurvatureStructure::Diagonal,
            Curvature::Kfac { .. } => CurvatureStructure::Kfac,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn groups(&self) -> &[Range<usize>] {
        &self.groups
    }

    /// Dense view of the raw (unit-noise) Gauss-Newton accumulation, for
    /// oracle tests and diagnostics: the symmetrized matrix for the full
    /// structure, a diagonal matrix for the diagonal structure, and `None`
    /// for KFAC, whose factored form does not pin down one dense matrix.
    pub fn raw_ggn(&self) -> Option<DMatrix<f64>> {
        match &self.curv {
            Curvature::Full { ggn, .. } => Some(ggn.clone()),
            Curvature::Diagonal { diag } => Some(DMatrix::from_diagonal(diag)),
            Curvature::Kfac { .. } => None,
        }
    }

    fn map_blocks_to_groups(&self) -> Result<Vec<usize>, SurrogateError> {
        match &self.curv {
            Curvature::Kfac { blocks } => blocks
                .iter()
                .map(|b| {
                    self.groups
                        .iter()
                        .position(|g| {
                            g.start <= b.shape.range.start && b.shape.range.end <= g.end
                        })
                        .ok_or_else(|| {
                            SurrogateError::Invalid(
                                "every KFAC block must lie inside one prior group".to_string(),
                            )
                        })
                })
                .collect(),
            _ => Ok(Vec::new()),
        }
    }

    /// Prior precision at flat parameter index `p`.
    fn lambda_at(&self, p: usize) -> f64 {
        for (g, range) in self.groups.iter().enumerate() {
            if range.contains(&p) {
                return self.lambda[g];
            }
        }
        unreachable!("groups tile the parameter vector")
    }

    /// Whether the single-group fast paths apply.
    fn scalar_lambda(&self) -> Option<f64> {
        if self.groups.len() == 1 {
            Some(self.lambda[0])
        } else {
            None
        }
    }

    /// Assemble the dense posterior precision (full structure only).
    fn dense_precision(&self) -> DMatrix<f64> {
        match &self.curv {
            Curvature::Full { ggn, .. } => {
                let mut prec = ggn / self.sigma2;
                for p in 0..self.param_count {
                    prec[(p, p)] += self.lambda_at(p);
                }
                prec
            }
            _ => unreachable!("dense precision is only assembled for the full structure"),
        }
    }

    /// log|Prec|.
    pub fn log_det_precision(&self) -> Result<f64, SurrogateError> {
        match &self.curv {
            Curvature::Full { eig_vals, .. } => {
                if let Some(lambda) = self.scalar_lambda() {
                    Ok(eig_vals
                        .iter()
                        .map(|e| (e / self.sigma2 + lambda).ln())
                        .sum())
                } else {
                    let (chol, _) = cholesky_with_jitter(&self.dense_precision(), 1e-12, 1e-6)?;
                    Ok(cholesky_log_det(&chol))
                }
            }
            Curvature::Diagonal { diag } => Ok((0..self.param_count)
                .map(|p| (diag[p] / self.sigma2 + self.lambda_at(p)).ln())
                .sum()),
            Curvature::Kfac { blocks } => {
                let mut acc = 0.0;
                for (b, block) in blocks.iter().enumerate() {
                    let lambda = self.lambda[self.block_group[b]];
                    for i in 0..block.row_vals.len() {
                        for j in 0..block.col_vals.len() {
                            let e = block.row_vals[i] * block.col_vals[j] / block.count;
                            acc += (e / self.sigma2 + lambda).ln();
                        }
                    }
                }
                Ok(acc)
            }
        }
    }

    /// Quadratic form J Sigma J^T for a (rows x params) Jacobian; the result
    /// is symmetric PSD of size rows x rows. Stacking per-candidate Jacobians
    /// yields a joint covariance across candidates.
    pub fn quad_form(&self, jac: &DMatrix<f64>) -> Result<DMatrix<f64>, SurrogateError> {
        if jac.ncols() != self.param_count {
            return Err(SurrogateError::DimensionMismatch {
                expected: self.param_count,
                found: jac.ncols(),
            });
        }
        let out = match &self.curv {
            Curvature::Full {
                eig_vals,
                eig_vecs,
                ..
            } => {
                if let Some(lambda) = self.scalar_lambda() {
                    // W = J U; quad = W diag(1/prec) W^T.
                    let w = jac * eig_vecs;
                    let mut scaled = w.clone();
                    for k in 0..eig_vals.len() {
                        let prec = eig_vals[k] / self.sigma2 + lambda;
                        for r in 0..scaled.nrows() {
                            scaled[(r, k)] /= prec;
                        }
                    }
                    &scaled * w.transpose()
                } else {
                    let (chol, _) = cholesky_with_jitter(&self.dense_precision(), 1e-12, 1e-6)?;
                    let solved = chol.solve(&jac.transpose());
                    jac * solved
                }
            }
            Curvature::Diagonal { diag } => {
                let rows = jac.nrows();
                let mut out = DMatrix::zeros(rows, rows);
                for p in 0..self.param_count {
                    let prec = diag[p] / self.sigma2 + self.lambda_at(p);
                    for r in 0..rows {
                        let jr = jac[(r, p)];
                        if jr == 0.0 {
                            continue;
                        }
                        for c in 0..rows {
                            out[(r, c)] += jr * jac[(c, p)] / prec;
                        }
                    }
                }
                out
            }
            Curvature::Kfac { blocks } => {
                let rows = jac.nrows();
                let mut out = DMatrix::zeros(rows, rows);
                for (b, block) in blocks.iter().enumerate() {
                    let lambda = self.lambda[self.block_group[b]];
                    let (nr, nc) = (block.shape.rows, block.shape.cols);
                    // Transform each Jacobian row's layer block into the
                    // factor eigenbasis: T = U_r^T M U_c.
                    let transformed: Vec<DMatrix<f64>> = (0..rows)
                        .map(|r| {
                            let m = DMatrix::from_fn(nr, nc, |i, j| {
                                jac[(r, block.shape.range.start + i * nc + j)]
                            });
                            block.row_vecs.transpose() * m * &block.col_vecs
                        })
                        .collect();
                    for i in 0..nr {
                        for j in 0..nc {
                            let e = block.row_vals[i] * block.col_vals[j] / block.count;
                            let inv_prec = 1.0 / (e / self.sigma2 + lambda);
                            for r in 0..rows {
                                let tr = transformed[r][(i, j)];
                                if tr == 0.0 {
                                    continue;
                                }
                                for c in 0..rows {
                                    out[(r, c)] += tr * transformed[c][(i, j)] * inv_prec;
                                }
                            }
                        }
                    }
                }
                out
            }
        };
        Ok((&out + out.transpose()) * 0.5)
    }

    /// tr(Sigma) restricted to one prior group.
    pub fn trace_sigma_group(&self, group: usize) -> Result<f64, SurrogateError> {
        let range = self.groups[group].clone();
        match &self.curv {
            Curvature::Full { eig_vals, .. } => {
                if let Some(lambda) = self.scalar_lambda() {
                    // A single group spans every parameter, so the group
                    // trace is the full trace: sum_k 1/prec_k.
                    Ok(eig_vals
                        .iter()
                        .map(|e| 1.0 / (e / self.sigma2 + lambda))
                        .sum())
                } else {
                    let (chol, _) = cholesky_with_jitter(&self.dense_precision(), 1e-12, 1e-6)?;
                    let inv = chol.inverse();
                    Ok(range.map(|p| inv[(p, p)]).sum())
                }
            }
            Curvature::Diagonal { diag } => Ok(range
                .map(|p| 1.0 / (diag[p] / self.sigma2 + self.lambda_at(p)))
                .sum()),
            Curvature::Kfac { blocks } => {
                let mut acc = 0.0;
                for (b, block) in blocks.iter().enumerate() {
                    if self.block_group[b] != group {
                        continue;
                    }
                    let lambda = self.lambda[group];
                    for i in 0..block.row_vals.len() {
                        for j in 0..block.col_vals.len() {
                            let e = block.row_vals[i] * block.col_vals[j] / block.count;
                            acc += 1.0 / (e / self.sigma2 + lambda);
                        }
                    }
                }
                Ok(acc)
            }
        }
    }

    /// tr(Sigma G) with G the raw Gauss-Newton matrix; drives the noise
    /// gradient of the evidence.
    pub fn trace_sigma_ggn(&self) -> Result<f64, SurrogateError> {
        match &self.curv {
            Curvature::Full {
                ggn,
                eig_vals,
                eig_vecs: _,
            } => {
                if let Some(lambda) = self.scalar_lambda() {
                    Ok(eig_vals
                        .iter()
                        .map(|e| e / (e / self.sigma2 + lambda))
                        .sum())
                } else {
                    let (chol, _) = cholesky_with_jitter(&self.dense_precision(), 1e-12, 1e-6)?;
                    let inv = chol.inverse();
                    // tr(Prec^-1 G): both symmetric.
                    Ok(inv.zip_fold(ggn, 0.0, |acc, a, b| acc + a * b))
                }
            }
            Curvature::Diagonal { diag } => Ok((0..self.param_count)
                .map(|p| diag[p] / (diag[p] / self.sigma2 + self.lambda_at(p)))
                .sum()),
            Curvature::Kfac { blocks } => {
                let mut acc = 0.0;
                for (b, block) in blocks.iter().enumerate() {
                    let lambda = self.lambda[self.block_group[b]];
                    for i in 0..block.row_vals.len() {
                        for j in 0..block.col_vals.len() {
                            let e = block.row_vals[i] * block.col_vals[j] / block.count;
                            acc += e / (e / self.sigma2 + lambda);
                        }
                    }
                }
                Ok(acc)
            }
        }
    }
}

// ----- evidence -----------------------------------------------------------

/// Sufficient statistics of the MAP fit needed by the evidence: the number of
/// scalar observations (samples x outputs) and the sum of squared residuals
/// at the MAP parameters.
#[derive(Debug, Clone, Copy)]
pub struct FitStats {
    pub n_obs: usize,
    pub sse: f64,
}

/// Log marginal likelihood (evidence) of the Laplace approximation around
/// `theta`:
///
///   log Z = log N(y | g(theta), sigma2)            [Gaussian log-likelihood]
///         + sum_g [ P_g/2 log lambda_g - lambda_g/2 ||theta_g||^2 ]
///         - 1/2 log|Prec|
///
/// The two (P/2) log 2pi occupancy terms of the prior and the Gaussian
/// volume cancel and are omitted from both places.
pub fn log_evidence(
    model: &CurvatureModel,
    theta: &DVector<f64>,
    stats: &FitStats,
) -> Result<f64, SurrogateError> {
    if theta.len() != model.param_count() {
        return Err(SurrogateError::DimensionMismatch {
            expected: model.param_count(),
            found: theta.len(),
        });
    }
    let n = stats.n_obs as f64;
    let log_lik = -0.5 * n * (2.0 * std::f64::consts::PI * model.sigma2).ln()
        - stats.sse / (2.0 * model.sigma2);
    let mut log_prior = 0.0;
    for (g, range) in model.groups().iter().enumerate() {
        let p_g = range.len() as f64;
        let norm2: f64 = range.clone().map(|p| theta[p] * theta[p]).sum();
        log_prior += 0.5 * p_g * model.lambda[g].ln() - 0.5 * model.lambda[g] * norm2;
    }
    Ok(log_lik + log_prior - 0.5 * model.log_det_precision()?)
}

/// Analytic evidence gradients with respect to log(lambda_g) and log(sigma2).
pub fn evidence_gradients(
    model: &CurvatureModel,
    theta: &DVector<f64>,
    stats: &FitStats,
) -> Result<(Vec<f64>, f64), SurrogateError> {
    let mut grad_lambda = Vec::with_capacity(model.groups().len());
    for (g, range) in model.groups().iter().enumerate() {
        let p_g = range.len() as f64;
        let norm2: f64 = range.clone().map(|p| theta[p] * theta[p]).sum();
        let trace = model.trace_sigma_group(g)?;
        // d logZ / d log lambda_g.
        grad_lambda.push(0.5 * p_g - 0.5 * model.lambda[g] * (norm2 + trace));
    }
    let n = stats.n_obs as f64;
    let trace_sg = model.trace_sigma_ggn()?;
    // d logZ / d log sigma2.
    let grad_sigma2 =
        -0.5 * n + stats.sse / (2.0 * model.sigma2) + trace_sg / (2.0 * model.sigma2);
    Ok((grad_lambda, grad_sigma2))
}

/// Settings for evidence maximization.
#[derive(Debug, Clone, Copy)]
pub struct MargLikConfig {
    pub iterations: u64,
    pub lr: f64,
    /// Also tune the observation noise, not just the prior precisions.
    pub tune_sigma2: bool,
    pub lambda_bounds: (f64, f64),
    pub sigma2_bounds: (f64, f64),
}

impl Default for MargLikConfig {
    fn default() -> Self {
        MargLikConfig {
            iterations: 100,
            lr: 0.1,
            tune_sigma2: true,
            lambda_bounds: (1e-4, 1e4),
            sigma2_bounds: (1e-6, 1e2),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MargLikReport {
    pub initial_evidence: f64,
    pub final_evidence: f64,
}

/// Maximize the evidence over log prior precisions (and optionally log
/// noise) by Adam ascent with a cosine-annealed learning rate. The model is
/// left at the best parameters encountered, so tuning never lowers the
/// evidence.
pub fn tune_marginal_likelihood(
    model: &mut CurvatureModel,
    theta: &DVector<f64>,
    stats: &FitStats,
    cfg: &MargLikConfig,
) -> Result<MargLikReport, SurrogateError> {
    let n_groups = model.lambda.len();
    let dim = n_groups + usize::from(cfg.tune_sigma2);
    let mut x = DVector::zeros(dim);
    for g in 0..n_groups {
        x[g] = model.lambda[g].ln();
    }
    if cfg.tune_sigma2 {
        x[n_groups] = model.sigma2.ln();
    }
    let (lambda_lo, lambda_hi) = (cfg.lambda_bounds.0.ln(), cfg.lambda_bounds.1.ln());
    let (sigma_lo, sigma_hi) = (cfg.sigma2_bounds.0.ln(), cfg.sigma2_bounds.1.ln());

    let apply = |model: &mut CurvatureModel, x: &DVector<f64>| {
        for g in 0..n_groups {
            model.lambda[g] = x[g].exp();
        }
        if cfg.tune_sigma2 {
            model.sigma2 = x[n_groups].exp();
        }
    };

    apply(model, &x);
    let initial_evidence = log_evidence(model, theta, stats)?;
    let mut best_x = x.clone();
    let mut best_evidence = initial_evidence;

    let mut adam = Adam::new(AdamConfig::new(cfg.lr), dim);
    for step in 0..cfg.iterations {
        let (grad_lambda, grad_sigma2) = evidence_gradients(model, theta, stats)?;
        let mut grad = DVector::zeros(dim);
        for g in 0..n_groups {
            grad[g] = -grad_lambda[g]; // ascent via negated gradient
        }
        if cfg.tune_sigma2 {
            grad[n_groups] = -grad_sigma2;
        }
        if !grad.iter().all(|g| g.is_finite()) {
            break;
        }
        adam.step(&mut x, &grad, cosine_scale(step, cfg.iterations));
        for g in 0..n_groups {
            x[g] = x[g].clamp(lambda_lo, lambda_hi);
        }
        if cfg.tune_sigma2 {
            x[n_groups] = x[n_groups].clamp(sigma_lo, sigma_hi);
        }
        apply(model, &x);
        let evidence = log_evidence(model, theta, stats)?;
        if evidence.is_finite() && evidence > best_evidence {
            best_evidence = evidence;
            best_x.copy_from(&x);
        }
    }
    apply(model, &best_x);
    Ok(MargLikReport {
        initial_evidence,
        final_evidence: best_evidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn random_design(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
    }

    fn full_model_from_design(
        x: &DMatrix<f64>,
        sigma2: f64,
        lambda: f64,
    ) -> CurvatureModel {
        let p = x.ncols();
        let mut acc = GgnAccumulator::full(p);
        for i in 0..x.nrows() {
            acc.add_jacobian(&DMatrix::from_fn(1, p, |_, c| x[(i, c)])).unwrap();
        }
        acc.finalize(sigma2, vec![0..p], vec![lambda]).unwrap()
    }

    #[test]
    fn full_curvature_matches_conjugate_linear_model() {
        // Linear model: Jacobians are the inputs, so Sigma must equal the
        // ridge posterior covariance (X^T X / s2 + lambda I)^-1 exactly.
        let (n, p, sigma2, lambda) = (12, 4, 0.3, 2.5);
        let x = random_design(n, p, 1);
        let model = full_model_from_design(&x, sigma2, lambda);

        let prec_direct =
            x.transpose() * &x / sigma2 + DMatrix::identity(p, p) * lambda;
        let sigma_direct = prec_direct.clone().try_inverse().unwrap();

        // log|Prec|.
        assert_relative_eq!(
            model.log_det_precision().unwrap(),
            prec_direct.determinant().ln(),
            epsilon = 1e-9
        );
        // Quadratic forms at a few query points.
        let queries = random_design(3, p, 2);
        let quad = model.quad_form(&queries).unwrap();
        let direct = &queries * &sigma_direct * queries.transpose();
        assert_relative_eq!(quad, direct, epsilon = 1e-9);
        // Trace.
        assert_relative_eq!(
            model.trace_sigma_group(0).unwrap(),
            sigma_direct.trace(),
            epsilon = 1e-9
        );
        // tr(Sigma G).
        let g = x.transpose() * &x;
        assert_relative_eq!(
            model.trace_sigma_ggn().unwrap(),
            (&sigma_direct * &g).trace(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn laplace_evidence_is_exact_for_the_linear_model() {
        // For Bayesian linear regression the Laplace approximation is exact:
        // log Z must equal the direct marginal likelihood
        // N(y | 0, X X^T / lambda + sigma2 I).
        let (n, p, sigma2, lambda) = (10, 3, 0.2, 1.7);
        let x = random_design(n, p, 3);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));

        let model = full_model_from_design(&x, sigma2, lambda);
        // theta* = ridge solution.
        let prec = x.transpose() * &x / sigma2 + DMatrix::identity(p, p) * lambda;
        let theta = prec.clone().try_inverse().unwrap() * x.transpose() * &y / sigma2;
        let resid = &y - &x * &theta;
        let stats = FitStats {
            n_obs: n,
            sse: resid.norm_squared(),
        };
        let evidence = log_evidence(&model, &theta, &stats).unwrap();

        let c = &x * x.transpose() / lambda + DMatrix::identity(n, n) * sigma2;
        let direct = -0.5 * y.dot(&(c.clone().try_inverse().unwrap() * &y))
            - 0.5 * c.determinant().ln()
            - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(evidence, direct, epsilon = 1e-8);
    }

    #[test]
    fn kfac_is_exact_for_a_single_linear_layer() {
        // One layer with identity sensitivities: the row factor is n I, so
        // the Kronecker product with count n is the exact GGN.
        let (n, rows, cols) = (9, 2, 4);
        let x = random_design(n, cols, 5);
        let p = rows * cols;
        let shapes = vec![KfacLayerShape {
            range: 0..p,
            rows,
            cols,
        }];
        let mut kfac = GgnAccumulator::kfac(shapes, p).unwrap();
        let mut full = GgnAccumulator::full(p);
        for i in 0..n {
            let a = DVector::from_fn(cols, |c, _| x[(i, c)]);
            let s = DMatrix::identity(rows, rows);
            let site = LayerSite { a: a.clone(), s };
            kfac.add_sites(std::slice::from_ref(&site)).unwrap();
            // Jacobian of output k wrt row-major params: s[k,r] * a[c].
            let jac = DMatrix::from_fn(rows, p, |k, idx| {
                let (r, c) = (idx / cols, idx % cols);
                if r == k {
                    a[c]
                } else {
                    0.0
                }
            });
            full.add_jacobian(&jac).unwrap();
        }
        let (sigma2, lambda) = (0.4, 0.9);
        let kfac = kfac.finalize(sigma2, vec![0..p], vec![lambda]).unwrap();
        let full = full.finalize(sigma2, vec![0..p], vec![lambda]).unwrap();

        assert_relative_eq!(
            kfac.log_det_precision().unwrap(),
            full.log_det_precision().unwrap(),
            epsilon = 1e-4, max_relative = 1e-5
        );
        assert_relative_eq!(
            kfac.trace_sigma_group(0).unwrap(),
            full.trace_sigma_group(0).unwrap(),
            epsilon = 1e-4, max_relative = 1e-5
        );
        assert_relative_eq!(
            kfac.trace_sigma_ggn().unwrap(),
            full.trace_sigma_ggn().unwrap(),
            epsilon = 1e-4, max_relative = 1e-5
        );
        let queries = random_design(3, p, 6);
        assert_relative_eq!(
            kfac.quad_form(&queries).unwrap(),
            full.quad_form(&queries).unwrap(),
            epsilon = 1e-4, max_relative = 1e-5
        );
    }

    #[test]
    fn kfac_is_exact_for_a_single_contribution() {
        // M = 1: (R x C) / 1 is the exact rank-structured block.
        let (rows, cols) = (3, 5);
        let p = rows * cols;
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let a = DVector::from_fn(cols, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s = DMatrix::from_fn(2, rows, |_, _| rng.sample::<f64, _>(StandardNormal));

        let shapes = vec![KfacLayerShape {
            range: 0..p,
            rows,
            cols,
        }];
        let mut kfac = GgnAccumulator::kfac(shapes, p).unwrap();
        kfac.add_sites(&[LayerSite {
            a: a.clone(),
            s: s.clone(),
        }])
        .unwrap();
        let mut full = GgnAccumulator::full(p);
        let jac = DMatrix::from_fn(2, p, |k, idx| {
            let (r, c) = (idx / cols, idx % cols);
            s[(k, r)] * a[c]
        });
        full.add_jacobian(&jac).unwrap();

        let kfac = kfac.finalize(1.0, vec![0..p], vec![0.5]).unwrap();
        let full = full.finalize(1.0, vec![0..p], vec![0.5]).unwrap();
        assert_relative_eq!(
            kfac.log_det_precision().unwrap(),
            full.log_det_precision().unwrap(),
            epsilon = 1e-4, max_relative = 1e-5
        );
        let queries = random_design(2, p, 8);
        assert_relative_eq!(
            kfac.quad_form(&queries).unwrap(),
            full.quad_form(&queries).unwrap(),
            epsilon = 1e-4, max_relative = 1e-5
        );
    }

    #[test]
    fn diagonal_matches_full_for_orthogonal_design() {
        // Orthogonal columns scaled differently: the GGN is diagonal, so the
        // diagonal structure is exact.
        let x = DMatrix::from_row_slice(
            4,
            2,
            &[2.0, 0.0, -2.0, 0.0, 0.0, 0.5, 0.0, -0.5],
        );
        let full = full_model_from_design(&x, 0.3, 1.1);
        let mut acc = GgnAccumulator::diagonal(2);
        for i in 0..4 {
            acc.add_jacobian(&DMatrix::from_fn(1, 2, |_, c| x[(i, c)])).unwrap();
        }
        let diag = acc.finalize(0.3, vec![0..2], vec![1.1]).unwrap();
        assert_relative_eq!(
            diag.log_det_precision().unwrap(),
            full.log_det_precision().unwrap(),
            epsilon = 1e-9
        );
        let q = random_design(2, 2, 9);
        assert_relative_eq!(
            diag.quad_form(&q).unwrap(),
            full.quad_form(&q).unwrap(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn evidence_gradients_match_finite_differences() {
        let (n, p) = (15, 4);
        let x = random_design(n, p, 10);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let theta = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = &x * &theta
            + DVector::from_fn(n, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
        let resid = &y - &x * &theta;
        let stats = FitStats {
            n_obs: n,
            sse: resid.norm_squared(),
        };

        // Two groups to exercise the grouped paths.
        let build = |sigma2: f64, l0: f64, l1: f64| {
            let mut acc = GgnAccumulator::full(p);
            for i in 0..n {
                acc.add_jacobian(&DMatrix::from_fn(1, p, |_, c| x[(i, c)])).unwrap();
            }
            acc.finalize(sigma2, vec![0..2, 2..p], vec![l0, l1]).unwrap()
        };

        let (sigma2, l0, l1) = (0.35, 1.4, 0.6);
        let model = build(sigma2, l0, l1);
        let (grad_lambda, grad_sigma2) = evidence_gradients(&model, &theta, &stats).unwrap();

        let h = 1e-6;
        let ev = |s: f64, a: f64, b: f64| {
            log_evidence(&build(s, a, b), &theta, &stats).unwrap()
        };
        let fd_l0 = (ev(sigma2, (l0.ln() + h).exp(), l1) - ev(sigma2, (l0.ln() - h).exp(), l1))
            / (2.0 * h);
        let fd_l1 = (ev(sigma2, l0, (l1.ln() + h).exp()) - ev(sigma2, l0, (l1.ln() - h).exp()))
            / (2.0 * h);
        let fd_s = (ev((sigma2.ln() + h).exp(), l0, l1) - ev((sigma2.ln() - h).exp(), l0, l1))
            / (2.0 * h);
        assert_relative_eq!(grad_lambda[0], fd_l0, epsilon = 1e-5, max_relative = 1e-4);
        assert_relative_eq!(grad_lambda[1], fd_l1, epsilon = 1e-5, max_relative = 1e-4);
        assert_relative_eq!(grad_sigma2, fd_s, epsilon = 1e-5, max_relative = 1e-4);
    }

    #[test]
    fn evidence_gradients_match_finite_differences_kfac() {
        let (n, rows, cols) = (8, 2, 3);
        let p = rows * cols;
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let sites: Vec<LayerSite> = (0..n)
            .map(|_| LayerSite {
                a: DVector::from_fn(cols, |_, _| rng.sample::<f64, _>(StandardNormal)),
                s: DMatrix::from_fn(2, rows, |_, _| rng.sample::<f64, _>(StandardNormal)),
            })
            .collect();
        let theta = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let stats = FitStats {
            n_obs: n,
            sse: 3.7,
        };

        let build = |sigma2: f64, lambda: f64| {
            let shapes = vec![KfacLayerShape {
                range: 0..p,
                rows,
                cols,
            }];
            let mut acc = GgnAccumulator::kfac(shapes, p).unwrap();
            for site in &sites {
                acc.add_sites(std::slice::from_ref(site)).unwrap();
            }
            acc.finalize(sigma2, vec![0..p], vec![lambda]).unwrap()
        };
        let (sigma2, lambda) = (0.5, 0.8);
        let model = build(sigma2, lambda);
        let (grad_lambda, grad_sigma2) = evidence_gradients(&model, &theta, &stats).unwrap();

        let h = 1e-6;
        let ev = |s: f64, l: f64| log_evidence(&build(s, l), &theta, &stats).unwrap();
        let fd_l =
            (ev(sigma2, (lambda.ln() + h).exp()) - ev(sigma2, (lambda.ln() - h).exp())) / (2.0 * h);
        let fd_s =
            (ev((sigma2.ln() + h).exp(), lambda) - ev((sigma2.ln() - h).exp(), lambda)) / (2.0 * h);
        assert_relative_eq!(grad_lambda[0], fd_l, epsilon = 1e-5, max_relative = 1e-4);
        assert_relative_eq!(grad_sigma2, fd_s, epsilon = 1e-5, max_relative = 1e-4);
    }

    #[test]
    fn tuning_never_lowers_the_evidence_and_beats_a_grid() {
        let (n, p) = (40, 5);
        let x = random_design(n, p, 20);
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let theta_true = DVector::from_fn(p, |_, _| 0.7 * rng.sample::<f64, _>(StandardNormal));
        let y = &x * &theta_true
            + DVector::from_fn(n, |_, _| 0.4 * rng.sample::<f64, _>(StandardNormal));

        // MAP at fixed (sigma2, lambda) init; stats at that theta.
        let sigma2_init = 0.1;
        let lambda_init = 1.0;
        let prec = x.transpose() * &x / sigma2_init + DMatrix::identity(p, p) * lambda_init;
        let theta = prec.try_inverse().unwrap() * x.transpose() * &y / sigma2_init;
        let resid = &y - &x * &theta;
        let stats = FitStats {
            n_obs: n,
            sse: resid.norm_squared(),
        };

        let build = |sigma2: f64, lambda: f64| {
            let mut acc = GgnAccumulator::full(p);
            for i in 0..n {
                acc.add_jacobian(&DMatrix::from_fn(1, p, |_, c| x[(i, c)])).unwrap();
            }
            acc.finalize(sigma2, vec![0..p], vec![lambda]).unwrap()
        };
        let mut model = build(sigma2_init, lambda_init);
        let report = tune_marginal_likelihood(
            &mut model,
            &theta,
            &stats,
            &MargLikConfig::default(),
        )
        .unwrap();
        assert!(report.final_evidence >= report.initial_evidence);

        // The tuned evidence should match or beat a coarse grid search.
        let mut grid_best = f64::NEG_INFINITY;
        for li in -3..=3 {
            for si in -3..=1 {
                let m = build(10f64.powi(si), 10f64.powi(li));
                grid_best = grid_best.max(log_evidence(&m, &theta, &stats).unwrap());
            }
        }
        assert!(
            report.final_evidence >= grid_best - 0.5,
            "tuned {} vs grid {}",
            report.final_evidence,
            grid_best
        );
    }

    #[test]
    fn zero_targets_drive_lambda_to_the_upper_bound() {
        // With theta* = 0 and no residual signal the evidence increases in
        // lambda indefinitely, so tuning should hit the configured cap.
        let (n, p) = (10, 3);
        let x = random_design(n, p, 30);
        let mut acc = GgnAccumulator::full(p);
        for i in 0..n {
            acc.add_jacobian(&DMatrix::from_fn(1, p, |_, c| x[(i, c)])).unwrap();
        }
        let mut model = acc.finalize(0.1, vec![0..p], vec![1.0]).unwrap();
        let theta = DVector::zeros(p);
        let stats = FitStats { n_obs: n, sse: 0.0 };
        let cfg = MargLikConfig {
            tune_sigma2: false,
            iterations: 500,
            lr: 0.2,
            ..MargLikConfig::default()
        };
        tune_marginal_likelihood(&mut model, &theta, &stats, &cfg).unwrap();
        assert!(
            model.lambda[0] > 0.9 * cfg.lambda_bounds.1,
            "lambda = {} did not reach the bound",
            model.lambda[0]
        );
    }

    #[test]
    fn accumulator_shape_validation() {
        assert!(GgnAccumulator::kfac(
            vec![KfacLayerShape {
                range: 0..5,
                rows: 2,
                cols: 2,
            }],
            5
        )
        .is_err());
        let mut acc = GgnAccumulator::full(3);
        assert!(acc.add_jacobian(&DMatrix::zeros(1, 4)).is_err());
        assert!(acc
            .add_sites(&[LayerSite {
                a: DVector::zeros(2),
                s: DMatrix::zeros(1, 2),
            }])
            .is_err());
        // Groups must tile the parameter vector.
        let acc = GgnAccumulator::full(3);
        assert!(acc.finalize(0.1, vec![0..2], vec![1.0]).is_err());
        let acc = GgnAccumulator::full(3);
        assert!(acc.finalize(0.1, vec![0..3], vec![1.0, 2.0]).is_err());
        let acc = GgnAccumulator::full(3);
        assert!(acc.finalize(-0.1, vec![0..3], vec![1.0]).is_err());
    }
}
