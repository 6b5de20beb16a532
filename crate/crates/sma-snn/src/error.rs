//! Crate-wide error type, grouped into the categories the CLI maps to
//! exit codes: configuration, I/O and numeric failures.

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or rank mismatch between tensors. Carries a diagnostic naming
    /// both shapes and the operation that rejected them.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value or combination (bad hyperparameter,
    /// unsatisfiable placement, divisibility violation, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Misuse of the autodiff graph (backward on a non-scalar, backward
    /// called twice without reset).
    #[error("graph error: {0}")]
    Graph(String),

    /// Filesystem failure while reading or writing `path`.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents do not parse (bad magic, truncation,
    /// malformed records). Carries enough context to locate the defect.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// Non-finite values where finite ones are required (NaN loss, ...).
    #[error("numeric error: {0}")]
    Numeric(String),
}

/// Exit-code category used by the command-line frontend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Numeric,
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            detail: detail.into(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Shape(_) | Error::Config(_) | Error::Graph(_) => ErrorCategory::Config,
            Error::Io { .. } | Error::Format { .. } => ErrorCategory::Io,
            Error::Numeric(_) => ErrorCategory::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_map_as_documented() {
        assert_eq!(
            Error::Shape("x".into()).category(),
            ErrorCategory::Config
        );
        assert_eq!(
            Error::format("f.evs", "bad magic").category(),
            ErrorCategory::Io
        );
        assert_eq!(
            Error::Numeric("nan".into()).category(),
            ErrorCategory::Numeric
        );
    }
}
