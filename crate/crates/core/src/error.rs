use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("record {record}: class index {index} out of range for {classes} classes")]
    ClassIndexOutOfRange {
        record: usize,
        index: u32,
        classes: usize,
    },

    #[error("truncated payload at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: u64, needed: usize },

    #[error("invalid embedding set: {0}")]
    InvalidSet(String),

    #[error("record {0} is a zero vector; direction is undefined")]
    ZeroVector(usize),

    #[error("unknown class name {0:?}")]
    UnknownClass(String),

    #[error("class {0:?} is listed in both base and new splits")]
    SplitOverlap(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("prediction service error: {0}")]
    Remote(String),

    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input (config, files, arguments) rather
    /// than by a failure while a stage was running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::UnknownClass(_)
            | Error::SplitOverlap(_)
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion(_)
            | Error::ClassIndexOutOfRange { .. }
            | Error::Truncated { .. }
            | Error::InvalidSet(_)
            | Error::Json(_) => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        }
    }
}
