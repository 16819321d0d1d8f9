use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("IDX parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite {what} in layer {layer} at flat index {index}")]
    NonFinite {
        what: String,
        layer: String,
        index: usize,
    },

    #[error("non-finite objective at step {step}: {diagnostics}")]
    NonFiniteObjective { step: usize, diagnostics: String },

    #[error("unknown output head {0}")]
    UnknownHead(usize),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("I/O error on {path}: {source}")]
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

    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }
}
