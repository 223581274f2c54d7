use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Two tensor shapes that must agree do not.
    #[error("shape mismatch in {op}: lhs shape {lhs:?}, rhs shape {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A configuration value is out of its valid range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A caller broke an API contract (non-scalar backward root, non-finite
    /// cost entries, and the like).
    #[error("contract violation: {0}")]
    Contract(String),

    /// More ground-truth objects than prediction slots.
    #[error("{gts} ground truths exceed prediction capacity {capacity}")]
    Capacity { gts: usize, capacity: usize },

    /// A file could not be parsed; `msg` names the offending line or field.
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },

    /// Training hit a state it cannot recover from (non-finite gradients).
    #[error("training aborted: {0}")]
    TrainAbort(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
