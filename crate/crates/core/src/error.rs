use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input with the wrong shape or an unusable size.
    #[error("input error: {0}")]
    Input(String),

    /// Class-imbalance treatment cannot be applied to the given data.
    #[error("imbalance handling error: {0}")]
    Imbalance(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn imbalance(msg: impl Into<String>) -> Self {
        Error::Imbalance(msg.into())
    }
}
