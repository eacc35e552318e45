use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("{what} = {value} is outside [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("fit error: {0}")]
    Fit(String),
    #[error("model inconsistency: {0}")]
    ModelInconsistency(String),
    #[error("integration produced a non-finite state at t = {t:e} s")]
    Integration { t: f64 },
    #[error("no sustained oscillation: {0}")]
    NoOscillation(String),
    #[error("measurement window spans {periods:.2} periods, at least {needed} required")]
    InsufficientWindow { periods: f64, needed: usize },
    #[error("measurement refused: {0}")]
    Refused(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
