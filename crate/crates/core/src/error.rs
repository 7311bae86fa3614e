use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A configuration value is outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An argument lies outside the domain of the operation (e.g. a time outside `[0, T]`).
    #[error("domain error: {0}")]
    Domain(String),

    /// The operation does not apply to the given kind of model or measure.
    #[error("contract error: {0}")]
    Contract(String),

    /// A particle state became NaN or infinite during simulation.
    #[error(
        "non-finite state in picard step {picard_step}, level {level}, particle {particle}, time index {time_index}"
    )]
    NonFinite {
        picard_step: usize,
        level: usize,
        particle: u64,
        time_index: usize,
    },

    /// A deterministic solver left its stability region.
    #[error("instability: {0}")]
    Instability(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
