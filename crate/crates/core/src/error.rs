use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("buffer length {got} does not match element count {expected} of shape {shape}")]
    Construction {
        shape: Shape,
        expected: usize,
        got: usize,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error at record {index}: {message}")]
    Data { index: usize, message: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("model spec error at row {row}: {message}")]
    Spec { row: usize, message: String },
    #[error("spec file line {line}: {message}")]
    SpecParse { line: usize, message: String },
    #[error("checkpoint: bad magic {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("checkpoint: unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint: truncated at byte {offset} (needed {needed} more)")]
    Truncated { offset: usize, needed: usize },
    #[error("checkpoint: tensor #{index} mismatch: expected `{expected}`, found `{found}`")]
    TensorMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
