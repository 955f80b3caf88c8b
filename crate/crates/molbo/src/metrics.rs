//! Campaign evaluation metrics: normalized regret (GAP), Pareto fronts, and
//! dominated hypervolume for two or three objectives.
//!
//! Everything here works in internal (maximize) convention. GAP rescales the
//! incumbent trajectory so 0 means "no better than the best initial-design
//! point" and 1 means "pool optimum found"; hypervolume measures the region
//! dominated by an observation set relative to a reference point.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("hypervolume supports 2 or 3 objectives, got {dim}")]
    UnsupportedDim { dim: usize },
    #[error("point {index} has {found} component(s), expected {expected}")]
    DimensionMismatch {
        index: usize,
        found: usize,
        expected: usize,
    },
    #[error("non-finite coordinate in point {index}")]
    NonFinite { index: usize },
}

/// Normalized regret of an incumbent value: (incumbent - best initial) /
/// (optimum - best initial). When the initial design already contains the
/// optimum the denominator vanishes and GAP is defined as 1.
pub fn gap(incumbent: f64, init_best: f64, optimum: f64) -> f64 {
    let denom = optimum - init_best;
    if denom == 0.0 {
        1.0
    } else {
        (incumbent - init_best) / denom
    }
}

/// GAP applied to a whole incumbent trajectory.
pub fn gap_trajectory(incumbents: &[f64], init_best: f64, optimum: f64) -> Vec<f64> {
    incumbents
        .iter()
        .map(|&v| gap(v, init_best, optimum))
        .collect()
}

/// `a` dominates `b` when a >= b componentwise with at least one strict
/// inequality (maximization).
fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return false;
        }
        if x > y {
            strict = true;
        }
    }
    strict
}

/// Indices of the non-dominated points, ascending. Duplicates of a
/// non-dominated point are all kept: equal points do not dominate each other.
pub fn pareto_front(points: &[Vec<f64>]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| !points.iter().any(|other| dominates(other, &points[i])))
        .collect()
}

fn validate(points: &[Vec<f64>], dim: usize) -> Result<(), MetricsError> {
    for (index, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(MetricsError::DimensionMismatch {
                index,
                found: p.len(),
                expected: dim,
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite { index });
        }
    }
    Ok(())
}

/// Hypervolume of the region dominated by `points` above `reference`
/// (maximization): the measure of the union of boxes [reference, p]. Points
/// that fail to dominate the reference contribute nothing. Supports two and
/// three objectives.
pub fn hypervolume(points: &[Vec<f64>], reference: &[f64]) -> Result<f64, MetricsError> {
    let dim = reference.len();
    if !(2..=3).contains(&dim) {
        return Err(MetricsError::UnsupportedDim { dim });
    }
    if !reference.iter().all(|v| v.is_finite()) {
        return Err(MetricsError::NonFinite {
            index: usize::MAX,
        });
    }
    validate(points, dim)?;
    let contributing: Vec<&Vec<f64>> = points
        .iter()
        .filter(|p| p.iter().zip(reference).all(|(v, r)| v > r))
        .collect();
    if contributing.is_empty() {
        return Ok(0.0);
    }
    match dim {
        2 => Ok(hv2(
            &contributing
                .iter()
                .map(|p| (p[0], p[1]))
                .collect::<Vec<_>>(),
            (reference[0], reference[1]),
        )),
        _ => Ok(hv3(&contributing, reference)),
    }
}

/// Two-objective hypervolume by a sorted sweep: walk the points by
/// descending first coordinate and accumulate the strip each point adds
/// above the running second-coordinate frontier.
fn hv2(points: &[(f64, f64)], reference: (f64, f64)) -> f64 {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite coordinates"));
    let mut hv = 0.0;
    let mut frontier = reference.1;
    for (x, y) in sorted {
        if y > frontier {
            hv += (x - reference.0) * (y - frontier);
            frontier = y;
        }
    }
    hv
}

/// Three-objective hypervolume by slicing along the third coordinate: within
/// a slab every point whose third coordinate reaches the slab's top
/// contributes its (first, second) projection to a 2-D hypervolume.
fn hv3(points: &[&Vec<f64>], reference: &[f64]) -> f64 {
    let mut zs: Vec<f64> = points.iter().map(|p| p[2]).collect();
    zs.sort_by(|a, b| b.partial_cmp(a).expect("finite coordinates"));
    zs.dedup();
    zs.push(reference[2]);

    let mut hv = 0.0;
    for pair in zs.windows(2) {
        let (top, bottom) = (pair[0], pair[1]);
        let slab: Vec<(f64, f64)> = points
            .iter()
            .filter(|p| p[2] >= top)
            .map(|p| (p[0], p[1]))
            .collect();
        hv += hv2(&slab, (reference[0], reference[1])) * (top - bottom);
    }
    hv
}

/// Reference point for a pool: componentwise minimum of the internal
/// objectives minus 1% of the per-component range. A degenerate (constant)
/// component falls back to an absolute offset so the reference stays strictly
/// below every point.
pub fn reference_point(internal_points: &[Vec<f64>]) -> Vec<f64> {
    if internal_points.is_empty() {
        return Vec::new();
    }
    let dim = internal_points[0].len();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for p in internal_points {
        for c in 0..dim {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    (0..dim)
        .map(|c| {
            let range = hi[c] - lo[c];
            let offset = if range > 0.0 { 0.01 * range } else { 1e-6 };
            lo[c] - offset
        })
        .collect()
}
