//! Error type shared by every module.

use thiserror::Error;

/// Failures raised by model construction, simulation, solvers and checks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coefficient: family `{family}` is non-finite at {point}")]
    InvalidCoefficient { family: String, point: String },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("simultaneous impulses at time {time}")]
    SimultaneousImpulses { time: f64 },
    #[error("cone violation: impulse {index} has a size outside the cone")]
    ConeViolation { index: usize },
    #[error("impulse time {time} outside [{start}, {end}]")]
    TimeOutOfRange { time: f64, start: f64, end: f64 },
    #[error("impulse count {count} exceeds the bound {bound}")]
    TooManyImpulses { count: usize, bound: usize },
    #[error("divergence: non-finite state at node {node} of path {path}")]
    Divergence { node: usize, path: usize },
    #[error("fixed-point non-convergence in slice {slice} at time level {level}")]
    NonConvergence { slice: usize, level: usize },
    #[error("derivative inconsistency in family `{family}`: {detail}")]
    DerivativeInconsistency { family: String, detail: String },
    #[error("ordering violation: {0}")]
    Ordering(String),
    #[error("order check inconclusive: {0}")]
    OrderInconclusive(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("adjoint/bundle mismatch: {0}")]
    Mismatch(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name: name.to_string(),
        reason: reason.into(),
    }
}
