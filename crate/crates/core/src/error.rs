use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("computation error: {0}")]
    Computation(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// Process exit code: 1 usage, 2 data, 3 computation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Config(_) => 1,
            Error::Schema(_)
            | Error::Data(_)
            | Error::Format(_)
            | Error::Alignment(_)
            | Error::Io(_) => 2,
            Error::UndefinedMetric(_)
            | Error::Computation(_)
            | Error::Training(_)
            | Error::Degenerate(_) => 3,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
