use std::fmt;
use std::path::Path;

/// Where a configuration problem was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Where {
    Line(usize),
    File,
    Flag,
    Env,
    Validation,
}

impl fmt::Display for Where {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Where::Line(n) => write!(f, "config line {n}"),
            Where::File => f.write_str("config file"),
            Where::Flag => f.write_str("command-line flag"),
            Where::Env => f.write_str("environment"),
            Where::Validation => f.write_str("config"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{at}, key `{key}`: {message}")]
    Config {
        at: Where,
        key: String,
        message: String,
    },
    #[error("configs differ outside estimator/window: {0:?}")]
    ConfigMismatch(Vec<String>),
    #[error("{context}: {source}")]
    Task {
        context: String,
        #[source]
        source: metastep_core::Error,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl HarnessError {
    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}

/// Attaches a context string to core errors.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, HarnessError>;
}

impl<T> Context<T> for metastep_core::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, HarnessError> {
        self.map_err(|source| HarnessError::Task {
            context: what(),
            source,
        })
    }
}
