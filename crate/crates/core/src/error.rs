use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("backward error: {0}")]
    Backward(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
