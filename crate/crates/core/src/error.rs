use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's preconditions.
    Shape(String),
    /// A run configuration is internally inconsistent or incompatible
    /// with a checkpoint.
    Config(String),
    /// An operation produced (or was fed) a NaN/Inf where finite values
    /// are required.
    NonFinite(String),
    /// An evaluation-protocol rule was violated (e.g. a held-out domain
    /// image reached the training loop).
    Protocol(String),
    /// Malformed input file.
    Parse(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Protocol(msg) => write!(f, "protocol violation: {msg}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}
