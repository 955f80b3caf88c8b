//! Acquisition policies over a posterior predictive: Thompson sampling
//! (joint across candidates when a full covariance is available, marginal
//! otherwise), expected improvement, upper confidence bound, and a
//! scalarized Thompson variant for multiple objectives.
//!
//! All policies return the argmax candidate position within the scored set,
//! breaking ties toward the lowest index, together with the per-candidate
//! scores for auditability.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg;
use crate::stats::{norm_cdf, norm_pdf};
use crate::surrogate::PosteriorPredictive;

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error("no candidates to score")]
    NoCandidates,
    #[error("policy expects a single output, posterior has {found}")]
    MultiOutput { found: usize },
    #[error("{count} scalarization weight(s) for {outputs} output(s)")]
    WeightCount { count: usize, outputs: usize },
    #[error("scalarization weights must be non-negative with a positive sum")]
    BadWeights,
    #[error("beta must be non-negative, got {beta}")]
    BadBeta { beta: f64 },
    #[error("non-finite acquisition score for candidate {index}")]
    NonFiniteScore { index: usize },
}

/// Result of scoring one candidate set: the chosen position (index into the
/// scored slice, not the pool), its score, all scores, and whether Thompson
/// sampling used the joint covariance or fell back to marginals.
#[derive(Debug, Clone)]
pub struct AcquisitionChoice {
    pub index: usize,
    pub score: f64,
    pub scores: Vec<f64>,
    pub joint: bool,
}

fn argmax_lowest_tie(scores: &[f64]) -> Result<usize, AcquisitionError> {
    if scores.is_empty() {
        return Err(AcquisitionError::NoCandidates);
    }
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(AcquisitionError::NonFiniteScore { index: i });
        }
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

fn choice(scores: Vec<f64>, joint: bool) -> Result<AcquisitionChoice, AcquisitionError> {
    let index = argmax_lowest_tie(&scores)?;
    Ok(AcquisitionChoice {
        index,
        score: scores[index],
        scores,
        joint,
    })
}

/// Draw one sample per candidate for output `output`. Uses the full
/// covariance (adding escalating diagonal jitter if needed) when available;
/// falls back to independent marginals otherwise. Returns the samples and
/// whether the draw was joint.
fn sample_output(
    post: &PosteriorPredictive,
    output: usize,
    rng: &mut ChaCha12Rng,
) -> (Vec<f64>, bool) {
    let n = post.candidates();
    let z: DVector<f64> = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
    if let Some(covs) = &post.covariances {
        if let Ok((chol, _)) = linalg::cholesky_default(&covs[output]) {
            let correlated = chol.l() * &z;
            let samples = (0..n)
                .map(|i| post.means[(i, output)] + correlated[i])
                .collect();
            return (samples, true);
        }
    }
    let samples = (0..n)
        .map(|i| post.means[(i, output)] + post.variances[(i, output)].sqrt() * z[i])
        .collect();
    (samples, false)
}

/// Thompson sampling for a single objective: draw one function sample over
/// the candidates and pick its argmax.
pub fn thompson_sample(
    post: &PosteriorPredictive,
    seed: u64,
) -> Result<AcquisitionChoice, AcquisitionError> {
    if post.outputs() != 1 {
        return Err(AcquisitionError::MultiOutput {
            found: post.outputs(),
        });
    }
    if post.candidates() == 0 {
        return Err(AcquisitionError::NoCandidates);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (scores, joint) = sample_output(post, 0, &mut rng);
    choice(scores, joint)
}

/// Expected improvement over `incumbent` (the best observed internal value):
/// EI = (mu - f*) Phi(z) + sigma phi(z) with z = (mu - f*) / sigma, and the
/// deterministic limit max(mu - f*, 0) when sigma = 0.
pub fn expected_improvement(
    post: &PosteriorPredictive,
    incumbent: f64,
) -> Result<AcquisitionChoice, AcquisitionError> {
    if post.outputs() != 1 {
        return Err(AcquisitionError::MultiOutput {
            found: post.outputs(),
        });
    }
    let scores = (0..post.candidates())
        .map(|i| {
            let mu = post.means[(i, 0)];
            let sigma = post.variances[(i, 0)].sqrt();
            let gain = mu - incumbent;
            if sigma > 0.0 {
                let z = gain / sigma;
                gain * norm_cdf(z) + sigma * norm_pdf(z)
            } else {
                gain.max(0.0)
            }
        })
        .collect();
    choice(scores, false)
}

/// Upper confidence bound: mu + sqrt(beta) * sigma.
pub fn upper_confidence_bound(
    post: &PosteriorPredictive,
    beta: f64,
) -> Result<AcquisitionChoice, AcquisitionError> {
    if post.outputs() != 1 {
        return Err(AcquisitionError::MultiOutput {
            found: post.outputs(),
        });
    }
    if !(beta >= 0.0) {
        return Err(AcquisitionError::BadBeta { beta });
    }
    let scores = (0..post.candidates())
        .map(|i| post.means[(i, 0)] + beta.sqrt() * post.variances[(i, 0)].sqrt())
        .collect();
    choice(scores, false)
}

/// Scalarized Thompson sampling for multiple objectives: draw one sample per
/// output (jointly across candidates when possible), combine with the given
/// non-negative weights (normalized to sum 1; `None` means uniform), and
/// pick the argmax of the scalarized sample.
pub fn scalarized_thompson(
    post: &PosteriorPredictive,
    weights: Option<&[f64]>,
    seed: u64,
) -> Result<AcquisitionChoice, AcquisitionError> {
    let c = post.outputs();
    if post.candidates() == 0 {
        return Err(AcquisitionError::NoCandidates);
    }
    let weights = match weights {
        Some(w) => {
            if w.len() != c {
                return Err(AcquisitionError::WeightCount {
                    count: w.len(),
                    outputs: c,
                });
            }
            let sum: f64 = w.iter().sum();
            if w.iter().any(|&v| !(v >= 0.0)) || !(sum > 0.0) {
                return Err(AcquisitionError::BadWeights);
            }
            w.iter().map(|v| v / sum).collect::<Vec<f64>>()
        }
        None => vec![1.0 / c as f64; c],
    };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut scores = vec![0.0; post.candidates()];
    let mut joint = true;
    for (k, w) in weights.iter().enumerate() {
        let (samples, output_joint) = sample_output(post, k, &mut rng);
        joint &= output_joint;
        for (s, v) in scores.iter_mut().zip(samples) {
            *s += w * v;
        }
    }
    choice(scores, joint)
}
