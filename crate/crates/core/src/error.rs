use std::path::PathBuf;

use crate::numkernel::KernelError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: format error at byte {offset}: {reason}", path.display())]
    Format { path: PathBuf, offset: u64, reason: String },
    #[error("{}: {reason}", path.display())]
    Parse { path: PathBuf, reason: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("report error: {0}")]
    Report(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownKey { .. } | Error::InvalidValue { .. } | Error::Report(_) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Parse { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Kernel(KernelError::Shape { .. }) => 2,
            Error::Kernel(KernelError::State(_)) => 4,
        }
    }
}
