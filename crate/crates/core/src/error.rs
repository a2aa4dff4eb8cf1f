use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version { path: PathBuf, expected: u32, found: u32 },

    #[error("{path}: size mismatch for {what}: expected {expected} bytes, found {actual}")]
    Size {
        path: PathBuf,
        what: String,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: malformed: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("variant mismatch: expected {expected}, file holds {found}")]
    Variant { expected: String, found: String },

    #[error("dtype mismatch: expected {expected}, found {found}")]
    Dtype { expected: String, found: String },

    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::NonFinite(_) | Error::CheckFailed(_) => 3,
            Error::Shape { .. }
            | Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::Version { .. }
            | Error::Size { .. }
            | Error::Format { .. }
            | Error::Variant { .. }
            | Error::Dtype { .. } => 2,
        }
    }
}
