//! Error type shared across the crate.

use thiserror::Error;

/// Errors raised by subspace estimation, samplers and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite gradient in sample {index}")]
    NonFiniteGradient { index: usize },

    #[error("matrix is not symmetric (max |m - m^T| = {max_asym:e})")]
    NotSymmetric { max_asym: f64 },

    #[error("eigensolver did not converge after {sweeps} sweeps")]
    EigenNoConvergence { sweeps: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid active dimension {requested} for a {dim}-dimensional space")]
    InvalidActiveDim { requested: usize, dim: usize },

    #[error("covariance is not positive definite")]
    NotPositiveDefinite,

    #[error("invalid tempering schedule: {0}")]
    InvalidSchedule(String),

    #[error("stage {stage} out of range (schedule has {stages} stages)")]
    StageOutOfRange { stage: usize, stages: usize },

    #[error("all particle weights are zero (population death)")]
    PopulationDead,

    #[error("proposal has zero density at one of its own draws")]
    InvalidProposalSupport,

    #[error("non-finite acceptance ratio with finite inputs")]
    NonFiniteAcceptance,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("results refer to different models: {0} vs {1}")]
    ModelMismatch(String, String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
