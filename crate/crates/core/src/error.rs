use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation angle too close to pi for a unique logarithm (trace = {trace})")]
    NearPiRotation { trace: f64 },

    #[error("Euler decomposition is degenerate (sin(el) = {sin_el})")]
    GimbalLock { sin_el: f64 },

    #[error("invalid rotation: {0}")]
    InvalidRotation(String),

    #[error("need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("dictionary has coincident keys")]
    DegenerateDictionary,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("quaternion sum has (near) zero norm")]
    ZeroSum,

    #[error("objective family mismatch: {0}")]
    FamilyMismatch(String),

    #[error("point behind camera (depth = {depth})")]
    BehindCamera { depth: f64 },

    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("no records for category '{0}'")]
    EmptyCategory(String),

    #[error("non-finite loss at epoch {epoch}, step {step} (category '{category}')")]
    NonFiniteLoss {
        category: String,
        epoch: usize,
        step: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
