use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("constraint violation: {0}")]
    ConstraintViolation(String),

    /// The adjoint gradient needs a differentiable interaction kernel.
    #[error("mode not supported: {0}")]
    ModeNotSupported(String),

    #[error("solver diverged at iteration {iteration}: {message}")]
    Divergence {
        iteration: usize,
        message: String,
        /// Flattened control iterate at the point of failure.
        controls: Vec<f64>,
    },

    #[error("solution not converged: {0}")]
    NotConverged(String),

    #[error("degenerate horizon: {0}")]
    DegenerateHorizon(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("config parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: msg.into(),
        }
    }
}
