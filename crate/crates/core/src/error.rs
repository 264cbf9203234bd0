use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes. Each maps onto a distinct process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Transfer,
    Io,
    Contract,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
            ErrorKind::Transfer => 5,
            ErrorKind::Io => 6,
            ErrorKind::Contract => 70,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: no positions flagged")]
    EmptyMask { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("sequence length {len} exceeds capacity {max}")]
    Capacity { len: usize, max: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("degenerate sample: {0}")]
    Degenerate(String),
    #[error("transfer error: {0}")]
    Transfer(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Data(_) | Error::EmptyInput(_) | Error::Degenerate(_) => ErrorKind::Data,
            Error::NonFinite(_) => ErrorKind::Numeric,
            Error::Transfer(_) => ErrorKind::Transfer,
            Error::Io { .. } => ErrorKind::Io,
            Error::Dimension { .. }
            | Error::EmptyMask { .. }
            | Error::Contract(_)
            | Error::Capacity { .. } => ErrorKind::Contract,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
