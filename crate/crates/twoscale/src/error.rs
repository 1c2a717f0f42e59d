use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to act on: indices for
/// horizon/divergence errors, the offending value for range errors.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of range: {0}")]
    ParameterOutOfRange(String),

    #[error("index {index} beyond schedule horizon {horizon}")]
    IndexBeyondHorizon { index: usize, horizon: usize },

    #[error("non-finite input to {0}")]
    NonFiniteInput(&'static str),

    #[error("iterate diverged: non-finite state first seen at step {index}")]
    NonFiniteIterate { index: usize },

    #[error("time {t} outside interpolant domain [{lo}, {hi}]")]
    ClockOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("fundamental-matrix flow unavailable: {0}")]
    FlowUnavailable(String),

    #[error("decay envelope fit failed: {0}")]
    FitFailed(String),

    #[error("settling horizon exceeded: target {target} not reached within {available} steps")]
    HorizonExceeded { target: f64, available: usize },

    #[error("ODE state non-finite at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("no replications satisfied the conditioning event (ball radius too small?)")]
    NoConditionedReplications,

    #[error("experiment plan invalid: {0}")]
    PlanInvalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
