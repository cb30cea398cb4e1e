use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The structural model produced a non-finite value.
    #[error("model mean is not finite for individual {individual}, observation {observation}")]
    Domain { individual: usize, observation: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("divergence at iteration {iteration}: coordinate {coord} = {value:e}")]
    Divergence {
        iteration: usize,
        coord: String,
        value: f64,
    },

    #[error(
        "all Monte-Carlo weights underflowed for individual {0}; \
         increase the number of draws or use importance sampling"
    )]
    WeightUnderflow(usize),

    #[error("every regularization level failed: {0}")]
    PathFailed(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Input/usage problems as opposed to numerical breakdowns.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_) | Error::Config(_) | Error::Io(_) | Error::Csv(_)
        )
    }
}
