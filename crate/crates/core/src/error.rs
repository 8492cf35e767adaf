//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for corpus generation, training, evaluation, and IO.
#[derive(Debug, Error)]
pub enum DiscoverError {
    /// Invalid configuration value or unknown configuration key.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed operation input (dimension mismatch, empty sequence, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Non-finite values or undefined numeric operations.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Batch does not satisfy an operation precondition.
    #[error("batch error: {0}")]
    Batch(String),

    /// Knowledge bank is missing entries or has inconsistent dimensions.
    #[error("bank error: {0}")]
    Bank(String),

    /// Clustering cannot run on the given points.
    #[error("clustering error: {0}")]
    Cluster(String),

    /// Corpus cannot be split as requested.
    #[error("split error: {0}")]
    Split(String),

    /// Pair sampling cannot satisfy the batch invariants.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Training diverged or violated a runtime invariant.
    #[error("training error: {0}")]
    Training(String),

    /// Serialized artifact is malformed or of an unsupported version.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl DiscoverError {
    /// Process exit code for the CLI: 2 for configuration problems,
    /// 3 for runtime/numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            DiscoverError::Config(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, DiscoverError>;
