use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("validation failed in {module}: {message}")]
    Validation { module: &'static str, message: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("corpus is empty after filtering")]
    EmptyCorpus,

    #[error("unknown symptoms: {}", .0.join(", "))]
    UnknownSymptoms(Vec<String>),

    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(module: &'static str, message: impl Into<String>) -> Self {
        Error::Validation { module, message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad user input rather than internal failure.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation { .. }
                | Error::Precondition(_)
                | Error::UnknownSymptoms(_)
                | Error::UnknownVariant(_)
                | Error::EmptyCorpus
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
