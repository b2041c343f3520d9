use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("format error in {field}: {reason}")]
    Format { field: String, reason: String },
    #[error("location ({i}, {j}) outside a {h}x{w} grid")]
    LocationOutOfBounds {
        i: usize,
        j: usize,
        h: usize,
        w: usize,
    },
    #[error("pyramid level {0} missing")]
    MissingLevel(String),
    #[error("empty mask")]
    EmptyMask,
    #[error("unknown loss preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
