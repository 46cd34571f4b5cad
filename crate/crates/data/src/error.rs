use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("cannot load {}: {message}", file.display())]
    Load { file: PathBuf, message: String },
    #[error("schema error in {}: {message}", file.display())]
    Schema { file: PathBuf, message: String },
    #[error("invalid split: {0}")]
    Split(String),
    #[error(transparent)]
    Core(#[from] bevcar_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn load_err(file: impl Into<PathBuf>, message: impl std::fmt::Display) -> DataError {
    DataError::Load {
        file: file.into(),
        message: message.to_string(),
    }
}
