//! Bayesian optimization over a finite pool of candidate molecules.
//!
//! The engine selects candidates from a tabulated pool by fitting a Bayesian
//! surrogate to the observations made so far, scoring every remaining
//! candidate with its posterior predictive, and acquiring the argmax of an
//! acquisition policy (Thompson sampling by default). Three surrogate
//! families are provided:
//!
//! * exact Gaussian-process regression with Tanimoto (fingerprint) or
//!   Matérn-5/2 (dense feature) kernels,
//! * a Laplace-approximated MLP with Gauss-Newton curvature (full, diagonal,
//!   or Kronecker-factored),
//! * a small transformer whose LoRA adapters and regression head carry a
//!   Laplace posterior while the base weights stay frozen.
//!
//! Supporting machinery: a SMILES parser and Morgan-style circular
//! fingerprints ([`chem`]), pool/feature-file ingestion ([`pool`]),
//! acquisition policies ([`acquisition`]), the campaign driver ([`bo_loop`]),
//! and evaluation metrics ([`metrics`]).

pub mod acquisition;
pub mod bo_loop;
pub mod chem;
pub mod config;
pub mod hashing;
pub mod linalg;
pub mod metrics;
pub mod opt;
pub mod pool;
pub mod stats;
pub mod surrogate;

pub use pool::CandidatePool;
pub use surrogate::PosteriorPredictive;
