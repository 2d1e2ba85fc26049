use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite value at loop iteration {iteration} ({stage})")]
    LoopNumeric { iteration: usize, stage: &'static str },
    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("frozen encoder weights changed during training")]
    FrozenWeightsChanged,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Maps a `serde_json` error to a byte offset in `text`.
    pub(crate) fn from_json(err: serde_json::Error, text: &str) -> Self {
        let (line, column) = (err.line(), err.column());
        let mut offset = 0;
        if line > 0 {
            for (i, l) in text.split_inclusive('\n').enumerate() {
                if i + 1 == line {
                    offset += column.saturating_sub(1).min(l.len());
                    break;
                }
                offset += l.len();
            }
        }
        Error::Parse {
            offset,
            message: err.to_string(),
        }
    }
}
