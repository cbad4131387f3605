use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("test set is empty")]
    EmptyTestSet,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid fault-rate distribution: {0}")]
    InvalidDistribution(String),

    #[error("resilience table does not match: {0}")]
    TableMismatch(String),

    #[error("fleet reports are not comparable: {0}")]
    MismatchedFleets(String),

    #[error(transparent)]
    Select(#[from] SelectError),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Reasons a chip cannot be given a certified retraining budget.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectError {
    #[error("resilience table has no entries")]
    EmptyTable,

    #[error("fault rate {chip_rate} is beyond the profiled range (max {max_rate})")]
    RateBeyondProfile { chip_rate: f64, max_rate: f64 },

    #[error("fault rate {chip_rate} is bracketed by an unreachable profile entry at {entry_rate}")]
    Unrecoverable { chip_rate: f64, entry_rate: f64 },
}

impl SelectError {
    /// Stable identifier used in reports.
    pub fn code(&self) -> &'static str {
        match self {
            SelectError::EmptyTable => "EMPTY_TABLE",
            SelectError::RateBeyondProfile { .. } => "RATE_BEYOND_PROFILE",
            SelectError::Unrecoverable { .. } => "UNRECOVERABLE",
        }
    }
}

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("bad magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
}
