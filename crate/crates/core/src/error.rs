use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, index or range).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Every class was classified as vanished or new, so no minimum positive
    /// change ratio exists.
    #[error("monitor inconclusive: no class has a positive change ratio")]
    MonitorInconclusive,

    /// A scenario schedule failed validation. `key` names the offending field.
    #[error("invalid schedule `{key}`: {message}")]
    InvalidSchedule { key: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn invalid(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::InvalidSchedule {
        key: key.into(),
        message: message.into(),
    }
}
