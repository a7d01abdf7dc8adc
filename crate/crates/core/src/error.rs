use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numerical overflow in {0}")]
    NumericalOverflow(&'static str),

    #[error(
        "non-finite loss at epoch {epoch}: reconstruction = {reconstruction}, kl = {kl}"
    )]
    NonFiniteLoss {
        epoch: usize,
        reconstruction: f64,
        kl: f64,
    },

    #[error("no oracle regression function available: {0}")]
    MissingOracle(&'static str),

    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Csv(err.to_string())
    }
}
