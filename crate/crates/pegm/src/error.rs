//! Error type shared across the crate.

use ndarray::Array2;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, PegmError>;

#[derive(Error, Debug)]
pub enum PegmError {
    /// Caller broke an API contract (shape mismatch, asymmetric matrix, bad
    /// configuration value). Message names the argument.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Parameter outside the family's feasible set.
    #[error("infeasible parameter: {0}")]
    Infeasible(String),

    /// Value outside a function's mathematical domain (e.g. nonpositive
    /// Gaussian precision diagonal, negative counts).
    #[error("domain error: {0}")]
    Domain(String),

    /// All importance weights underflowed; the proposal is too far from the
    /// target for this sample size.
    #[error(
        "importance weights degenerate (ess {ess:.3e} of {n}): increase the sample size or move \
         the proposal closer to the target"
    )]
    WeightDegeneracy { ess: f64, n: usize },

    /// A conditional's natural parameter overflowed the family's sampler.
    #[error("conditional rate overflow at node {node}: natural parameter {value:.3e} too large")]
    RateOverflow { node: usize, value: f64 },

    /// Accept-reject ran out of proposal budget. Carries whatever was
    /// accepted so the caller can decide whether to keep it.
    #[error(
        "accept-reject exhausted {tries} tries with {accepted_n} of {requested} rows accepted \
         (rate {rate:.3e})"
    )]
    AcceptRejectExhausted {
        tries: usize,
        requested: usize,
        accepted_n: usize,
        rate: f64,
        rows: Array2<f64>,
    },

    /// Stochastic fit drifting away from a maximum.
    #[error("fit diverged: objective decreased for {0} consecutive iterations")]
    Divergence(usize),

    /// Node-wise regression has no finite minimizer (separated data at
    /// lambda = 0).
    #[error("node {node}: unpenalized regression diverges (separated data); refit with lambda > 0")]
    Separation { node: usize },

    /// Sampler chain cannot accept anything.
    #[error("chain acceptance rate {rate:.3e} below {floor:.3e} after adaptation")]
    ChainStalled { rate: f64, floor: f64 },

    /// Request exceeds an enumeration or long-run guard.
    #[error("resource guard: {0}")]
    Resource(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PegmError {
    pub fn contract(msg: impl Into<String>) -> Self {
        PegmError::Contract(msg.into())
    }

    pub fn infeasible(msg: impl Into<String>) -> Self {
        PegmError::Infeasible(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        PegmError::Domain(msg.into())
    }

    pub fn resource(msg: impl Into<String>) -> Self {
        PegmError::Resource(msg.into())
    }
}
