//! Group local-robustness verification for ReLU feed-forward classifiers.
//!
//! Given a network and a set of inputs, the verifier decides for every
//! L-infinity epsilon-ball whether the classification is constant over the
//! ball. Instead of analyzing balls one by one, it dynamically forms
//! mini-batches of balls with similar network computations and verifies each
//! batch jointly from an intermediate layer onward:
//!
//! * [`network`] — the classifier model, feed-forward passes, activation
//!   patterns.
//! * [`solver`] — a dense two-phase simplex LP solver plus branch-and-bound
//!   over binary variables, with incremental re-solving.
//! * [`encoder`] — MILP encodings: input boxes, big-M ReLU constraints,
//!   per-layer bound computation, the interval-union disjunction over a
//!   batch, and complete single-ball verification.
//! * [`clustering`] — Hamming distance over activation patterns,
//!   complete-linkage hierarchical clustering, and the batch-extraction tree.
//! * [`bandit`] — Gaussian mean-variance Thompson sampling over bucketed
//!   batch sizes, rewarded by batch velocity.
//! * [`driver`] — the orchestration loop: filtering, split-layer learning,
//!   batching, refinement, and velocity bookkeeping.
//! * [`oracle`] — an independent ground-truth verifier for tiny networks,
//!   used by tests and the acceptance suite.
//! * [`cli`] — configuration, report files, and the command-line entry point.

pub mod bandit;
pub mod cli;
pub mod clustering;
pub mod driver;
pub mod encoder;
pub mod network;
pub mod oracle;
pub mod solver;

use thiserror::Error;

/// Errors shared across the verifier.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input document (network file, input CSV, report JSON).
    #[error("parse error: {0}")]
    Parse(String),
    /// A layer, vector, or query has inconsistent dimensions.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A weight, bound, or coefficient is NaN or infinite where finiteness is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// The request violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A construct the loader recognizes but does not support.
    #[error("unsupported: {0}")]
    Unsupported(String),
    /// The LP/MILP solver could not produce a trustworthy result.
    #[error("solver failure: {0}")]
    Solver(String),
    /// Branch-and-bound exceeded the configured node limit.
    #[error("node limit exceeded ({0} nodes)")]
    NodeLimit(u64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
