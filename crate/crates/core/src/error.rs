use thiserror::Error;

/// Errors produced by the pNML library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// The training matrix has numerical rank 0.
    #[error("degenerate training set: numerical rank is 0")]
    DegenerateTraining,

    /// Malformed file content. `location` is a human readable position such
    /// as `byte offset 5` or `line 3, column 2`.
    #[error("format error at {location}: {message}")]
    Format { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
