use thiserror::Error;

/// Errors raised by model evaluation, simulation and the estimators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parameter {name} = {value} is outside the admissible domain ({constraint})")]
    Domain {
        name: String,
        value: f64,
        constraint: String,
    },

    #[error("diffusion matrix is not positive definite at x = {0:?}")]
    Ellipticity(Vec<f64>),

    #[error("numerical divergence: state component {value} exceeds the bound {bound:e}")]
    Divergence { value: f64, bound: f64 },

    #[error("coupled chains at level {level} did not meet within {cap} iterations")]
    MeetingCap { level: u32, cap: usize },

    #[error("rejection sampler exceeded {0} iterations")]
    RejectionCap(u64),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("replicate {index} failed after {completed} completed replicates: {source}")]
    Replicate {
        index: usize,
        completed: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
