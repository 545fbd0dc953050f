//! Error type shared by every module of the crate.

use thiserror::Error;

use crate::dynamics::Trajectory;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, EkiError>;

#[derive(Debug, Error)]
pub enum EkiError {
    /// Malformed arguments: wrong dimensions, empty inputs, bad parameters.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration that is well formed but cannot be realised.
    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    /// A diagnostic that needs data which was not supplied (e.g. the truth).
    #[error("not available: {0}")]
    NotAvailable(&'static str),

    /// Rate fits on data that carries no decay information.
    #[error("undefined rate: {0}")]
    UndefinedRate(String),

    /// A constructed object failed its own postcondition check.
    #[error("postcondition violated: {0}")]
    Postcondition(String),

    /// NaN or Inf appeared while evaluating the dynamics.
    #[error("non-finite value at t = {t}: {context}")]
    NonFinite { t: f64, context: String },

    /// The adaptive integrator could not make progress. The trajectory
    /// recorded up to the failure is kept.
    #[error("integrator failure at t = {t} (step {step:e}): {reason}")]
    IntegratorFailure {
        t: f64,
        step: f64,
        reason: String,
        partial: Box<Trajectory>,
    },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl EkiError {
    /// Process exit code: 1 for validation failures, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            EkiError::InvalidInput(_) | EkiError::InvalidConfiguration(_) | EkiError::Config(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        EkiError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::EkiError::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
