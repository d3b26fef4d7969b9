use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A record could not be parsed. `line` is 1-based.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A record parsed but violates a data invariant.
    #[error("line {line}: query `{query_id}`: {message}")]
    Validation {
        line: usize,
        query_id: String,
        message: String,
    },

    /// A response built in memory violates a data invariant.
    #[error("invalid response: {0}")]
    InvalidResponse(String),

    /// A caller broke an operation's precondition.
    #[error("query `{query_id}`, response {response_index}: {message}")]
    Contract {
        query_id: String,
        response_index: usize,
        message: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    /// The training loop hit a non-finite value and stopped.
    #[error("diverged at step {step}: {message}")]
    Divergence { step: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
