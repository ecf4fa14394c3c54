//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors produced by any stage of the evaluation engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad parameter ranges, unresolvable paths,
    /// mixture weights that do not sum to one, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Input data violates a contract (referential integrity, malformed
    /// header, feature out of encoding range, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A pipeline stage was invoked before its upstream artifacts exist.
    #[error("dependency error: {0}")]
    Dependency(String),

    /// An artifact on disk was produced under a different configuration
    /// than the one currently in effect.
    #[error("stale artifact: {0}")]
    StaleArtifact(String),

    /// Numeric failure: non-convergence, collinearity, NaN loss, singular
    /// design matrix.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 0 ok, 2 config, 3 dependency, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) => 2,
            Error::Dependency(_) | Error::StaleArtifact(_) => 3,
            Error::Numeric(_) => 4,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => 3,
        }
    }
}
