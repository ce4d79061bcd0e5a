use thiserror::Error;

use crate::io::checkpoint::CheckpointError;
use crate::io::tsplib::TsplibError;

#[derive(Debug, Error)]
pub enum GeldError {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("softmax row {row} is fully masked")]
    FullyMasked { row: usize },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("degenerate instance: {0}")]
    DegenerateInstance(String),
    #[error("invalid tour: {0}")]
    InvalidTour(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("no available nodes left")]
    Exhausted,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Tsplib(#[from] TsplibError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GeldError> = std::result::Result<T, E>;
