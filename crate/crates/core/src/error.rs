use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Calibration target is not bracketed by the statistic at the bounds.
    #[error("target {target} not bracketed: statistic is {at_low} at {low} and {at_high} at {high}")]
    Bracketing {
        target: f64,
        low: f64,
        high: f64,
        at_low: f64,
        at_high: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
