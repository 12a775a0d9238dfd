//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NuwaError {
    /// Tensor shapes incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An argument violated a precondition (bad index, empty split, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// A numerical routine failed to converge or produced non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A file did not match its expected on-disk format.
    #[error("format error: {0}")]
    Format(String),

    /// The requested pruning rate cannot be reached before the decay
    /// thresholds exhaust. Carries the best rate achieved.
    #[error("unreachable pruning target: best achieved rate {achieved:.4}")]
    UnreachableTarget { achieved: f64 },

    /// Training loss became non-finite; the model was restored to the last
    /// completed epoch.
    #[error("training diverged at epoch {epoch} (model restored to last good checkpoint)")]
    Diverged { epoch: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NuwaError>;
