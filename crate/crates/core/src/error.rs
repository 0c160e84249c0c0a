use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor shape was malformed or two shapes disagree.
    #[error("shape error: {0}")]
    Shape(String),
    /// A precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A configuration value is out of range.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A file exists but its content cannot be decoded.
    #[error("{path}: {msg}")]
    Load { path: PathBuf, msg: String },
    #[error("malformed data: {0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn load(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
