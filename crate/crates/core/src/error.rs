use std::path::PathBuf;

use hme_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HmeError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{source_name}:{line}: {msg}")]
    Format {
        source_name: String,
        line: usize,
        msg: String,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error("label vocabulary mismatch: {0}")]
    LabelMismatch(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl HmeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HmeError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(source_name: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        HmeError::Format {
            source_name: source_name.into(),
            line,
            msg: msg.into(),
        }
    }

    /// True for failures caused by numbers rather than by inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            HmeError::Numerical(_) | HmeError::Diverged { .. } | HmeError::Autodiff(AutodiffError::NonFinite { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, HmeError>;
