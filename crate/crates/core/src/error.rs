use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the crate.
///
/// The variants map onto the CLI exit-code classes: `Config` is a
/// configuration problem, `Protocol`/`Transport` are federation failures and
/// the remaining variants are data or numerical problems.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("ACE failed for every grid cell: {0}")]
    AceFailed(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("timed out waiting for {0}")]
    Timeout(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures of the federation layer (wire or peer problems).
    pub fn is_protocol(&self) -> bool {
        matches!(self, Error::Protocol(_) | Error::Transport(_) | Error::Timeout(_))
    }

    /// True for configuration problems.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
