use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed estimand document.
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    /// A well-formed estimand document that violates a structural invariant.
    #[error("invalid estimand: {0}")]
    Spec(String),

    /// Spec/dataset mismatch: missing columns, wrong roles, out-of-support values.
    #[error("schema error: {0}")]
    Schema(String),

    /// Singular systems, divergence, non-finite values.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("invalid argument: {0}")]
    Usage(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse error category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage,
    Schema,
    Numerical,
    Io,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Usage => 2,
            Category::Schema => 3,
            Category::Numerical => 4,
            Category::Io => 5,
        }
    }
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Syntax { .. } | Error::Spec(_) | Error::Usage(_) => Category::Usage,
            Error::Schema(_) => Category::Schema,
            Error::Numerical(_) => Category::Numerical,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => Category::Io,
        }
    }

    pub(crate) fn spec(msg: impl Into<String>) -> Self {
        Error::Spec(msg.into())
    }

    pub(crate) fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
