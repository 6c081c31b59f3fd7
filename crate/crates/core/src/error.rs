use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DkError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid level parameters: {0}")]
    InvalidLevel(String),

    #[error("level ratio mismatch: {0}")]
    RatioMismatch(String),

    #[error("noise stream used with role {actual:?} where {expected} was required")]
    StreamRole {
        expected: &'static str,
        actual: crate::noise::StreamRole,
    },

    #[error("trajectory mismatch: {0}")]
    TrajectoryMismatch(String),

    #[error("unknown built-in {kind} `{name}`")]
    UnknownBuiltin { kind: &'static str, name: String },

    #[error("rejection sampling envelope failure: {0}")]
    Envelope(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("run interrupted")]
    Interrupted,

    #[error("i/o error: {0}")]
    Io(String),

    #[error("malformed field file: {0}")]
    Format(String),
}

impl From<std::io::Error> for DkError {
    fn from(err: std::io::Error) -> Self {
        DkError::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, DkError>;
