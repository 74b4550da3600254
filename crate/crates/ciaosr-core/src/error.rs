use std::path::PathBuf;

/// Errors surfaced by dataset handling, checkpointing, training and evaluation.
///
/// Shape errors inside the tensor engine are programming-contract violations
/// and panic instead; everything that depends on user input or on-disk state
/// goes through this type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported or corrupt image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("dataset directory {0} contains no readable images")]
    EmptyDataset(PathBuf),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("non-finite loss at step {step} (loss = {loss})")]
    NonFiniteLoss { step: u64, loss: f64 },

    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn image(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Image { path: path.into(), reason: reason.into() }
    }

    pub fn checkpoint(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Checkpoint { path: path.into(), reason: reason.into() }
    }
}
