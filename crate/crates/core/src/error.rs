use thiserror::Error;

/// Errors produced anywhere in `era-core`.
#[derive(Debug, Error)]
pub enum EraError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid quadrature spec: {0}")]
    InvalidQuadrature(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("degenerate truncation mass {mass:e} in dimension {dim} (mean far outside [-1, 1])")]
    DegenerateMass { dim: usize, mass: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward called on a tape that was already consumed")]
    TapeConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor belongs to a different tape")]
    ForeignTensor,

    #[error("replay buffer holds {have} transitions, need {need}")]
    InsufficientBuffer { have: usize, need: usize },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("run records: {0}")]
    Record(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EraError>;
