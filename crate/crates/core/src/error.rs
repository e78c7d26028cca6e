use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{function} is undefined at {value}")]
    Domain { function: &'static str, value: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("task has an empty query set")]
    EmptyQuery,

    #[error("cluster {0} has no weight mass")]
    EmptyCluster(usize),

    #[error("digamma inversion did not converge for target {target}")]
    InversionFailed { target: f64 },

    #[error("not a feature container (magic bytes {found:?})")]
    NotAContainer { found: [u8; 8] },

    #[error("unsupported container {field}: {value}")]
    UnsupportedField { field: &'static str, value: u64 },

    #[error("container size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch { expected: u64, actual: u64 },

    #[error("row {row} sums to {sum}, not 1")]
    RowSum { row: usize, sum: f64 },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("not enough samples for class {class}: need {needed}, have {available}")]
    InsufficientSamples {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("task {task_index} (seed {seed}) failed: {source}")]
    Task {
        task_index: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
