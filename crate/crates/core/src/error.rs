use thiserror::Error;

/// Errors raised anywhere in the embedding/training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    LossNotScalar(Vec<usize>),

    #[error("backward called before any forward op was recorded")]
    BackwardBeforeForward,

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid partition: {0}")]
    Partition(#[from] PartitionError),

    #[error("data error: {0}")]
    Data(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("model has no attention in {0}")]
    NoAttention(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Violations of the covering / disjoint / nonempty partition contract.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PartitionError {
    #[error("feature indices not assigned to any group: {0:?}")]
    Uncovered(Vec<usize>),
    #[error("feature indices assigned to more than one group: {0:?}")]
    Overlap(Vec<usize>),
    #[error("group `{0}` is empty")]
    EmptyGroup(String),
    #[error("feature index {index} out of range for d = {d}")]
    OutOfRange { index: usize, d: usize },
    #[error("grouping has no groups")]
    NoGroups,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape { op, detail: detail.into() })
}
