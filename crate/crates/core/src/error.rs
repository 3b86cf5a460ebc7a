use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("path blow-up at step {step}")]
    PathBlowUp { step: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate strikes: price/delta system is singular")]
    DegenerateStrikes,

    #[error("default time {tau} outside window [{lower}, {upper}]")]
    DefaultOutsideWindow { tau: f64, lower: f64, upper: f64 },

    #[error("missing statistics for level {0}")]
    MissingStats(u32),

    #[error("quadrature did not converge: achieved relative accuracy {achieved:.3e}")]
    QuadratureNotConverged { achieved: f64 },

    #[error("root bracket [{low}, {high}] does not straddle a sign change")]
    BracketNoSignChange { low: f64, high: f64 },

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
