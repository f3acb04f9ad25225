use std::fmt;

/// Coarse failure category, used as the message prefix of the command-line tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Data,
    Io,
    Numeric,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Config => "CONFIG",
            Category::Data => "DATA",
            Category::Io => "IO",
            Category::Numeric => "NUMERIC",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid tap: {0}")]
    Tap(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("schedule error: step {step} exceeds total_steps {total_steps}")]
    Schedule { step: usize, total_steps: usize },

    #[error("corruption spec error: {0}")]
    Spec(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("corrupt container {path}: {reason}")]
    Corrupt { path: String, reason: String },

    #[error("storage error on {path}: {source}")]
    Storage {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Config(_) | Error::Tap(_) | Error::Spec(_) | Error::Schedule { .. } => {
                Category::Config
            }
            Error::Data(_) | Error::Split(_) | Error::Dimension(_) | Error::Evaluation(_) => {
                Category::Data
            }
            Error::Corrupt { .. } | Error::Storage { .. } | Error::Csv(_) | Error::Json(_) => {
                Category::Io
            }
            Error::Fit(_) | Error::Numeric(_) => Category::Numeric,
        }
    }

    pub(crate) fn storage(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
