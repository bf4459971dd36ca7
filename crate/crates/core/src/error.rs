use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite or otherwise unusable numeric input: {0}")]
    Numeric(String),
    #[error("matrix is singular to working precision")]
    SingularMatrix,
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("value outside the feature map domain: {0}")]
    Domain(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("degenerate model output: {0}")]
    DegenerateOutput(String),
    #[error("stale environment cache: {0}")]
    StaleCache(String),
    #[error("{path}: malformed file at byte offset {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("scan aborted: {succeeded} of {total} jobs succeeded")]
    ScanAborted { succeeded: usize, total: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
