use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("operation not supported by model `{model}`: {operation}")]
    Unsupported {
        model: String,
        operation: &'static str,
    },

    #[error("chain {chain}, step {step}: {source}")]
    AtStep {
        chain: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{chain_label} chain {chain}, step {step}: {source}")]
    InCoupledChain {
        chain_label: &'static str,
        chain: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by user-supplied configuration rather than by
    /// a failure while computing.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config { .. }
            | Error::Json(_)
            | Error::InvalidArgument { .. }
            | Error::InvalidSchedule(_)
            | Error::InvalidMixture(_)
            | Error::NotPositiveDefinite { .. }
            | Error::DimensionMismatch { .. } => true,
            Error::AtStep { .. } | Error::InCoupledChain { .. } => false,
            Error::Unsupported { .. } | Error::Empty(_) | Error::Io(_) => false,
        }
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
