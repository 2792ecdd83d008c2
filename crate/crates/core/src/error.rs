use thiserror::Error;

pub type Result<T, E = SorError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SorError {
    /// A value fell outside the domain of the function evaluating it.
    #[error("domain error: {0}")]
    Domain(String),

    /// Quadrature, linear algebra or root finding failed.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An iterative estimator stopped without meeting its tolerance.
    #[error("estimation error after {iterations} iterations: {message}")]
    Estimation {
        message: String,
        iterations: usize,
        /// Last iterate (or trajectory of iterates, flattened) when available.
        last_iterate: Vec<f64>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SorError {
    pub fn domain(msg: impl Into<String>) -> Self {
        SorError::Domain(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        SorError::Numeric(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        SorError::Config(msg.into())
    }

    /// True for failures that come from the numerics rather than from inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, SorError::Numeric(_) | SorError::Estimation { .. })
    }
}
