use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("activation cache missing for layer {layer}: re-run calibration with activation caching enabled")]
    MissingActivationCache { layer: usize },

    #[error("search space too large: C({n}, {r}) = {count} subsets exceeds {limit}; use sampled mode")]
    Combinatorial {
        n: usize,
        r: usize,
        count: u128,
        limit: u128,
    },

    #[error(transparent)]
    Format(#[from] crate::io::FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code, used in CLI error documents.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Resource(_) => "resource",
            Error::MissingActivationCache { .. } => "missing_activation_cache",
            Error::Combinatorial { .. } => "combinatorial",
            Error::Format(e) => e.code(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
