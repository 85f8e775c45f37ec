use std::path::PathBuf;

/// Errors raised anywhere in the training, coding and simulation pipeline.
#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("client error: {0}")]
    Client(String),

    #[error("training diverged (round {round:?}, client {client:?}): {detail}")]
    Diverged {
        round: Option<usize>,
        client: Option<usize>,
        detail: String,
    },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("Renyi divergence is infinite for p = {0}")]
    InfiniteDivergence(f64),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach round/client context to a divergence raised deep inside local training.
    pub fn with_client_context(self, round: usize, client: usize) -> Self {
        match self {
            Error::Diverged { detail, .. } => Error::Diverged {
                round: Some(round),
                client: Some(client),
                detail,
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
