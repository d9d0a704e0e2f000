use thiserror::Error;

/// Errors surfaced by the library. The CLI maps each variant family to a
/// distinct process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperParameter(String),

    #[error("resource limit: {0}")]
    ResourceLimit(String),

    #[error("insufficient regeneration: {0}")]
    InsufficientRegeneration(String),

    #[error("insufficient states: need {needed} distinct visited states, trace has {seen}")]
    InsufficientStates { needed: usize, seen: usize },

    #[error("optimization failed: {0}")]
    OptimizationFailure(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
