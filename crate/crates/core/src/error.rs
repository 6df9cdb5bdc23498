use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An operation was called outside its lifecycle contract, e.g. backward
    /// before forward.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient in '{0}'")]
    GradientNotFinite(String),

    #[error("training diverged: combined loss {0} exceeds 1e6")]
    Diverged(f64),

    #[error("depth image has no valid pixels")]
    EmptyDepth,

    #[error("empty evaluation set: {0}")]
    EmptyEval(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("missing tensor for parameter '{0}'")]
    MissingTensor(String),

    #[error("unsupported format version {got} (expected {expected})")]
    VersionMismatch { got: u16, expected: u16 },

    #[error("failed to decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn decode(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Decode {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
