use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },

    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },

    #[error("line {line}: {key}: {msg}")]
    Value { line: usize, key: String, msg: String },

    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),

    #[error(transparent)]
    Core(#[from] kmevo::Error),

    #[error(transparent)]
    Tensor(#[from] kmevo_tensor::TensorError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{file}, line {line}: {msg}")]
    Csv { file: String, line: usize, msg: String },

    #[error("contract violated: {0}")]
    Contract(String),
}

impl HarnessError {
    /// True for errors caused by the user's configuration.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Self::Syntax { .. }
                | Self::UnknownKey { .. }
                | Self::Value { .. }
                | Self::UnknownVariant(_)
                | Self::Core(kmevo::Error::Config(_) | kmevo::Error::Parse(_))
        )
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
