use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure in {what}: achieved error {achieved:e}")]
    Numeric { what: String, achieved: f64 },

    #[error("config error at key `{key}`: {message}")]
    Config { key: String, message: String },

    /// A particle velocity became non-finite; the run was aborted.
    #[error("non-finite velocity at t = {time} (step {step}, particle {particle})")]
    NonFinite {
        time: f64,
        step: u64,
        particle: usize,
    },

    #[error("fit refused: {0}")]
    Fit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
