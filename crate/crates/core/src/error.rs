use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("Gibbs kernel underflow ({0}); use the log-domain solver or a larger epsilon")]
    Underflow(String),

    #[error("Sinkhorn did not reach tolerance after {iterations} iterations (residual {residual:e})")]
    MaxIterExceeded { iterations: usize, residual: f64 },

    #[error("transport solution is not converged (residual {residual:e}, tolerance {tolerance:e})")]
    NotConverged { residual: f64, tolerance: f64 },

    #[error("Schur complement is singular: {0}")]
    SingularSchur(String),

    #[error("overflow: {0}")]
    Overflow(String),

    #[error("invalid range: s = {s} must be strictly below t = {t}")]
    InvalidRange { s: f64, t: f64 },

    #[error("row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("inner factorization diverged at iteration {iteration}: KL rose from {before:e} to {after:e}")]
    InnerDivergence {
        iteration: usize,
        before: f64,
        after: f64,
    },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn at_row(self, row: usize) -> Self {
        Error::Row {
            row,
            source: Box::new(self),
        }
    }
}
