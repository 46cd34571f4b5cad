use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("checkpoint {}: {message}", file.display())]
    Checkpoint { file: PathBuf, message: String },
    #[error("non-finite loss at step {step} on batch [{}]; diagnostics in {}", tokens.join(", "), dump.display())]
    NonFinite { step: usize, tokens: Vec<String>, dump: PathBuf },
    #[error("{0}")]
    Eval(String),
    #[error(transparent)]
    Core(#[from] bevcar_core::Error),
    #[error(transparent)]
    Data(#[from] bevcar_data::DataError),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn ckpt_err(file: impl Into<PathBuf>, message: impl std::fmt::Display) -> CliError {
    CliError::Checkpoint {
        file: file.into(),
        message: message.to_string(),
    }
}
