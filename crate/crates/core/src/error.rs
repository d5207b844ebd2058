use thiserror::Error;

/// Errors raised by the model, sampling, filtering and phantom layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("observation step {dt_obs} is not an integer multiple of the sub-step {dtau}")]
    NonIntegerSubstep { dt_obs: f64, dtau: f64 },

    #[error("final time {t_final} is not an integer multiple of the sub-step {dtau}")]
    NonIntegerQuadrature { t_final: f64, dtau: f64 },

    #[error("{n_obs} observations of step {dt_obs} overrun the final time {t_final}")]
    GridOverrun { n_obs: usize, dt_obs: f64, t_final: f64 },

    #[error("parameter `{name}` must be positive, got {value}")]
    NonpositiveParameter { name: &'static str, value: f64 },

    #[error("density must be positive, got {0}")]
    NonpositiveDensity(f64),

    #[error("observation error variance must be positive, got {0}")]
    NonpositiveVariance(f64),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("observation index {index} outside 1..={n_obs}")]
    IndexError { index: usize, n_obs: usize },

    #[error("function undefined at t = {0}")]
    DomainError(f64),

    #[error("covariance not factorizable after jitter escalation up to {last_jitter:e}")]
    NotFactorizable { last_jitter: f64 },

    #[error("sample set is empty")]
    EmptySamples,

    #[error("invalid interval [{lo}, {hi})")]
    InvalidInterval { lo: f64, hi: f64 },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{path}: {message}")]
    Io { path: String, message: String },

    #[error("ensemble needs at least 2 members, got {0}")]
    EnsembleTooSmall(usize),
}

pub type Result<T> = std::result::Result<T, Error>;
