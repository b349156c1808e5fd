use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parse error in {path}: {context}")]
    Parse { path: PathBuf, context: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("insufficient length: need at least {needed} frames, got {got}")]
    InsufficientLength { needed: usize, got: usize },

    #[error(
        "window [{start}, {end}] exceeds recording of {len} frames \
         (short by {deficit_before} frames before, {deficit_after} after)"
    )]
    OutOfRange {
        start: i64,
        end: i64,
        len: usize,
        deficit_before: usize,
        deficit_after: usize,
    },

    #[error("invalid alignment path: {0}")]
    InvalidPath(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("improvement undefined: {0}")]
    UndefinedImprovement(String),

    #[error("invalid gaussian statistics: {0}")]
    InvalidStats(String),

    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
