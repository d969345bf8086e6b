use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("duplicate record for home {home_id} at {timestamp}")]
    DuplicateRecord { home_id: String, timestamp: String },

    #[error("home {home_id}: cannot label events, {message}")]
    Labeling { home_id: String, message: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss in epoch {epoch}, batch {batch} (windows {first_window}..)")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        first_window: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for errors caused by bad configuration or arguments rather
    /// than runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
