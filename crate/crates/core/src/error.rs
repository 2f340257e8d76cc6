use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("operation `{op}` produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("manifest record {index}: {message}")]
    Manifest { index: usize, message: String },

    #[error("scene placement failed after {attempts} rejection samples")]
    Placement { attempts: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint has bad magic {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated: needed {needed} bytes, file has {available}")]
    Truncated { needed: u64, available: u64 },

    #[error("checkpoint shape table inconsistent: {0}")]
    ShapeTable(String),

    #[error("non-finite loss at step {step} in term `{term}`")]
    NonFiniteLoss { step: u64, term: &'static str },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
