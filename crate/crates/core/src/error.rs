use alloc::string::String;
use core::fmt;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A precondition on an argument was violated.
    InvalidArgument(String),
    /// The quantity asked for is not defined for the given input
    /// (e.g. a concordance index with no comparable pairs).
    UndefinedResult(String),
    /// The requested configuration cannot be realised by the data.
    Configuration(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            Error::UndefinedResult(m) => write!(f, "undefined result: {m}"),
            Error::Configuration(m) => write!(f, "configuration error: {m}"),
        }
    }
}

impl core::error::Error for Error {}
