use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Cholesky decomposition hit a non-positive pivot. The index identifies
    /// the first row at which the matrix fails to be positive definite.
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// The requested distribution is not on the lookup table's grid; the
    /// caller should fall back to a direct solve.
    #[error("lookup miss: {0}; use solve_logits instead")]
    LookupMiss(String),

    #[error("oracle query failed on draw {draw}: {message}")]
    Estimation { draw: usize, message: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("oracle returned label {label} outside [0, {label_count})")]
    LabelOutOfRange { label: usize, label_count: usize },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}
