use crate::quarter::Quarter;

/// Error type shared by every module of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid quarter range: {start} comes after {end}")]
    InvalidQuarterRange { start: Quarter, end: Quarter },

    #[error("invalid quarter `{0}` (expected YYYYQ1..YYYYQ4)")]
    InvalidQuarter(String),

    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: String, column: String },

    #[error("{path}, row {row}: {msg}")]
    ParseRow { path: String, row: usize, msg: String },

    #[error("{path}, row {row}: {msg}")]
    InvalidRecord { path: String, row: usize, msg: String },

    #[error("feature `{0}` has zero variance over the panel")]
    ZeroVariance(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("forward cache is stale: network parameters changed since the forward pass")]
    StaleCache,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("design matrix is rank deficient: columns {0:?} are linearly dependent")]
    RankDeficient(Vec<usize>),

    #[error("{0}")]
    InsufficientData(String),

    #[error("{0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
