use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A collective received a frame whose tags do not match what the local
    /// rank expected at this point of the schedule.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("orthogonality is undefined when every gradient has zero norm")]
    UndefinedMetric,

    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("replica consistency violated: {0}")]
    Consistency(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(expected: usize, found: usize) -> Self {
        Error::Shape { expected, found }
    }
}
