use thiserror::Error;

/// Errors raised by the estimation library.
///
/// Variants are grouped so that a front end can map them onto coarse exit
/// statuses with [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid field `{field}`: {message}")]
    Field { field: String, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("matrix is singular: minimum eigenvalue {eigenvalue:.3e} below floor {floor:.0e}")]
    Singular { eigenvalue: f64, floor: f64 },

    #[error("enumeration budget exceeded: {required} terms required, limit is {limit}")]
    Budget { required: u128, limit: u128 },

    #[error("initialization error: objective is {value} at the starting point")]
    Init { value: f64 },

    #[error(
        "line search stalled after {iterations} iterations: step {step:.3e}, objective {objective}, gradient norm {grad_norm:.3e}"
    )]
    Stall {
        iterations: usize,
        step: f64,
        objective: f64,
        grad_norm: f64,
    },

    #[error("replication {index} failed: {source}")]
    Replication {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification of an [`Error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numeric,
    Budget,
    Io,
}

impl Error {
    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Field {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_)
            | Error::Field { .. }
            | Error::Domain(_)
            | Error::Precondition(_)
            | Error::Json(_) => ErrorKind::Validation,
            Error::Numeric(_) | Error::Singular { .. } | Error::Init { .. } | Error::Stall { .. } => {
                ErrorKind::Numeric
            }
            Error::Budget { .. } => ErrorKind::Budget,
            Error::Replication { source, .. } => source.kind(),
            Error::Io(_) => ErrorKind::Io,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
