use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input {height}x{width} is not divisible by patch size {patch}")]
    NonDivisibleInput {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("encoder depth {0} is not divisible by 4")]
    DepthNotDivisibleBy4(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),

    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("maximum {0} weight is zero; sampling weights cannot be normalized")]
    DegenerateMax(&'static str),

    #[error("star polygons need at least 3 rays, got {0}")]
    BadRayCount(usize),

    #[error("prediction bundle has no {0} maps")]
    MissingRayMaps(&'static str),

    #[error("overlap {overlap} must be smaller than tile size {tile_size}")]
    OverlapTooLarge { tile_size: usize, overlap: usize },

    #[error("tile grid mismatch: {0}")]
    GridMismatch(String),

    #[error("tile at origin ({row}, {col}) failed: {source}")]
    TileFailed {
        row: usize,
        col: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
