use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, StarError>;

#[derive(Debug, Error)]
pub enum StarError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("row {row} is not a probability distribution (sum = {sum})")]
    Distribution { row: usize, sum: f64 },

    #[error("trace alignment error: teacher {what} = {teacher}, student {what} = {student}")]
    Alignment {
        what: &'static str,
        teacher: usize,
        student: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} (term {term})")]
    NonFinite { step: usize, term: String },

    #[error("training diverged at step {step}: loss {loss:e} exceeds {limit:e}")]
    Divergence { step: usize, loss: f64, limit: f64 },

    #[error("malformed tensor file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl StarError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        StarError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for failures caused by the numbers rather than by inputs or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(self, StarError::NonFinite { .. } | StarError::Divergence { .. })
    }

    pub fn is_io(&self) -> bool {
        matches!(self, StarError::Io(_) | StarError::Format { .. })
    }
}
