use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("unstable model: {0}")]
    Instability(String),

    /// Iteration blew up or failed to settle. `trace` holds the error sequence
    /// observed so far and `damping` the measured contraction constant, if any.
    #[error("divergence: {message}")]
    Divergence {
        message: String,
        trace: Vec<f64>,
        damping: Option<f64>,
    },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn num(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
