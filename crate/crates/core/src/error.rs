use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated stream at byte offset {offset}: {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("symbol {symbol} outside table range [{min}, {max}]")]
    Accounting { symbol: i32, min: i32, max: i32 },
    #[error("symbol range [{min}, {max}] exceeds the table limit; widen the range or clamp the latent")]
    RangeOverflow { min: i64, max: i64 },
    #[error("loss became NaN at iteration {iteration}")]
    NanLoss { iteration: usize },
    #[error("training loss became NaN in epoch {epoch}")]
    NanTraining { epoch: usize },
    #[error("model mismatch: bitstream carries {stream}, checkpoint is {checkpoint}")]
    ModelMismatch { stream: String, checkpoint: String },
    #[error("entropy coder failed: {0}")]
    Coder(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
