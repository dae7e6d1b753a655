use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated file: need at least {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("payload length {found} does not match dims (expected {expected} bytes)")]
    DimMismatch { expected: usize, found: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("parameter pattern {0:?} matched no parameters")]
    EmptyPartition(String),

    #[error("missing parameter {0:?}")]
    MissingParam(String),

    #[error("frozen tensor {0:?} was modified")]
    FrozenModified(String),

    #[error("uncovered voxel at {0:?}")]
    UncoveredVoxel([usize; 3]),

    #[error("missing checkpoint component: {0}")]
    MissingComponent(String),

    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),

    #[error("{0}")]
    Degenerate(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
