use std::path::PathBuf;

/// Library-wide error type. The CLI maps variants onto process exit codes:
/// configuration problems exit with 2, I/O problems with 3 and a NaN abort
/// during training with 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("region {0} lies fully outside the feature map")]
    RegionOutsideMap(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown class {0:?}")]
    UnknownClass(String),

    #[error("unknown aggregation mode {0:?}")]
    UnknownMode(String),

    #[error("evaluation over an empty test set")]
    EmptyTestSet,

    #[error("training loss became NaN at step {step}; last good checkpoint kept")]
    NanLoss { step: usize },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 I/O, 4 NaN abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Json { .. } | Error::Checkpoint { .. } => 3,
            Error::NanLoss { .. } => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
