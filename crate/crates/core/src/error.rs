use thiserror::Error;

use crate::data::PeReport;
use crate::synth::TraceEntry;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported disturbance density: {0}")]
    UnsupportedDensity(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// κ = 1 only admits γ = 0: the gap between the contracted ellipsoid and
    /// the original one shrinks to zero, leaving no room for any disturbance.
    #[error(
        "kappa = 1 requires gamma = 0 (got gamma = {gamma}): with no contraction the \
         distance between the ellipsoids x'Px <= kappa and x'Px <= 1 is zero, so no \
         nonzero disturbance can be absorbed"
    )]
    KappaOneWithDisturbance { gamma: f64 },

    #[error("insufficient excitation after {samples} samples (rank {rank} of {required})")]
    InsufficientExcitation {
        samples: usize,
        rank: usize,
        required: usize,
        report: Box<PeReport>,
    },

    #[error("Q is numerically singular: lambda_min = {lambda_min:e}, condition number {condition:e}")]
    SingularShape { lambda_min: f64, condition: f64 },

    #[error("no feasible kappa found after {solves} solves")]
    NoFeasibleKappa { solves: usize, trace: Vec<TraceEntry> },

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("invalid problem: {0}")]
    Problem(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
