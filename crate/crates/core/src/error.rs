use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("model not fitted: {0}")]
    Unfitted(&'static str),

    #[error("uncertainty quantifier error: {0}")]
    Quantifier(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing file {path}: {source}")]
    MissingFile {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse error classes, each mapped to a distinct process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    MissingFile,
    Schema,
    Numeric,
    Parameter,
    Data,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::MissingFile => 2,
            ErrorCategory::Schema => 3,
            ErrorCategory::Numeric => 4,
            ErrorCategory::Parameter => 5,
            ErrorCategory::Data => 6,
            ErrorCategory::Io => 7,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::MissingFile => "missing_file",
            ErrorCategory::Schema => "schema",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Parameter => "parameter",
            ErrorCategory::Data => "data",
            ErrorCategory::Io => "io",
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::MissingFile { .. } => ErrorCategory::MissingFile,
            Error::Schema(_)
            | Error::Version { .. }
            | Error::Checksum(_)
            | Error::Truncated(_) => ErrorCategory::Schema,
            Error::Numeric(_) => ErrorCategory::Numeric,
            Error::Parameter(_) | Error::Dimension { .. } | Error::Config(_) => {
                ErrorCategory::Parameter
            }
            Error::Data(_) | Error::Unfitted(_) | Error::Quantifier(_) => ErrorCategory::Data,
            Error::Io(_) => ErrorCategory::Io,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
