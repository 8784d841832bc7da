use nalgebra::DMatrix;
use thiserror::Error;

use crate::margin::DelayMarginResult;
use crate::model::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

/// Why a Riccati iteration stopped without reaching a fixed point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Diverged,
    IterationCap,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is singular within tolerance: {0}")]
    SingularMatrix(String),

    #[error("system is not mean-square stabilizable ({reason:?} after {iterations} iterations, |Z| = {last_norm:e})")]
    NotStabilizable {
        reason: StopReason,
        iterations: usize,
        last_norm: f64,
        /// Last finite iterate, kept so callers can still inspect the gain it induces.
        last_iterate: Box<DMatrix<f64>>,
    },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("consistency check failed: {what} (residual {residual:e})")]
    ConsistencyFailure { what: String, residual: f64 },

    #[error("closed loop is not mean-square stable (spectral radius {rho})")]
    Unstable { rho: f64 },

    #[error("input history has length {got}, expected {expected}")]
    HistoryLengthMismatch { expected: usize, got: usize },

    #[error("noise record has no value for delay index {index} at time {time}")]
    MissingNoise { index: usize, time: i64 },

    #[error("two paths share delay {0}")]
    DuplicateDelay(usize),

    #[error("invalid variance {0} for bernoulli loss noise without a loss probability")]
    InvalidVariance(f64),

    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("invalid system: {0}")]
    InvalidSystem(ValidationReport),

    #[error("every delay up to the cap is stabilizable; margin is only a lower bound")]
    CapReached(Box<DelayMarginResult>),

    #[error("stabilizability is not monotone in the delay")]
    MonotonicityAnomaly(Box<DelayMarginResult>),

    #[error("augmented moment operator of dimension {dim} exceeds cap {cap}")]
    TooLarge { dim: usize, cap: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("non-finite state in trial {trial} at step {step}")]
    NonFiniteState { trial: usize, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
