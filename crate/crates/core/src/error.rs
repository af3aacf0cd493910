use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("training diverged: non-finite value in {0}")]
    Divergence(&'static str),

    #[error("client has no data")]
    EmptyShard,

    #[error("no updates received")]
    NoUpdates,

    #[error("round yields no private aggregate")]
    NoPrivateAggregate,

    #[error("all client losses are zero; q-fair normalization is undefined")]
    ZeroLosses,

    #[error("communication time is zero; granularity is undefined")]
    UndefinedGranularity,

    #[error("elapsed time must be positive")]
    ZeroElapsed,

    #[error("cannot split {samples} samples across {clients} clients")]
    TooManyClients { clients: usize, samples: usize },

    #[error("unknown {kind} profile `{name}` (available: {})", available.join(", "))]
    UnknownProfile {
        kind: &'static str,
        name: String,
        available: Vec<String>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Whether the error stems from user-supplied configuration rather than
    /// a failure while the simulation was running.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::UnknownProfile { .. } | Error::TooManyClients { .. }
        )
    }
}
