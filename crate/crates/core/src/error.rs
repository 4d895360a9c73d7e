use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("data error at line {line}: {msg}")]
    DataLine { line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("index {index} out of range for catalog of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("loss kind mismatch: {0}")]
    KindMismatch(String),

    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by input data rather than by the caller.
    pub fn is_data_error(&self) -> bool {
        matches!(self, Error::DataLine { .. } | Error::Data(_) | Error::Io(_) | Error::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
