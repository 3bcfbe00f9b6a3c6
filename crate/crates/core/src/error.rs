use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller broke an operation precondition (shape, timing, alphabet).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A grid parameter invariant failed to hold; `invariant` names it.
    #[error("invalid grid parameters: {invariant}: {detail}")]
    InvalidGrid { invariant: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// RK4 produced a non-finite or runaway state.
    #[error("integration diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    /// Training produced a non-finite loss or gradient.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("model file error: {0}")]
    Model(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Diverged { .. } | Error::Numerical(_))
    }
}
