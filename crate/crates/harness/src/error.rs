use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("checkpoint field `{field}`: {msg}")]
    Checkpoint { field: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] tshf_core::Error),
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn checkpoint(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Self::Checkpoint {
            field: field.into(),
            msg: msg.into(),
        }
    }

    /// 2 for bad configuration or usage, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::Usage(_) => 2,
            _ => 1,
        }
    }
}
