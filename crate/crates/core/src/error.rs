use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum GpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// A nominally positive-definite matrix could not be factorized even
    /// after the largest jitter was tried.
    #[error("cholesky of {size}x{size} matrix failed (last jitter {jitter:e})")]
    Factorization { size: usize, jitter: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(String),

    #[error("parse error at row {row}, column \"{column}\": {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    /// Training stopped at `iteration`; the model holds the last parameters
    /// that evaluated cleanly.
    #[error("training aborted at iteration {iteration}: {source}")]
    Aborted {
        iteration: usize,
        source: Box<GpError>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GpError>;

impl GpError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        GpError::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        GpError::Argument(msg.into())
    }

    /// True for errors caused by ill-conditioned or non-finite numerics.
    pub fn is_numerical(&self) -> bool {
        if let GpError::Aborted { source, .. } = self {
            return source.is_numerical();
        }
        matches!(
            self,
            GpError::Factorization { .. } | GpError::Numerical(_) | GpError::NonFiniteGradient(_)
        )
    }
}
