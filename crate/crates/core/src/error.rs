use std::fmt;

/// Error type shared by every module in the crate.
#[derive(Debug)]
pub enum Error {
    /// Shape/dimension mismatch between operands; names both shapes.
    Dimension(String),
    /// Empty input where at least one element is required.
    EmptyInput(String),
    /// Numerically degenerate input (e.g. near-zero row norm in a cosine).
    Degenerate(String),
    /// A caller broke an API contract (non-scalar loss, missing grad, ...).
    Contract(String),
    /// Target vector entry outside {0,1}.
    Label(String),
    /// Invalid configuration value.
    Config(String),
    /// Non-finite value produced during training.
    Numeric(String),
    /// Two evaluations of a supposedly deterministic function differed.
    Determinism(String),
    /// Dataset generation cannot satisfy its constraints.
    Unsatisfiable(String),
    /// Token-slot capacity exceeded while rendering features.
    Capacity(String),
    /// Malformed checkpoint or CSV file; offset is the byte position when known.
    Format { offset: u64, msg: String },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::EmptyInput(m) => write!(f, "empty input: {m}"),
            Error::Degenerate(m) => write!(f, "degenerate input: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Label(m) => write!(f, "label error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Numeric(m) => write!(f, "numeric failure: {m}"),
            Error::Determinism(m) => write!(f, "determinism error: {m}"),
            Error::Unsatisfiable(m) => write!(f, "unsatisfiable: {m}"),
            Error::Capacity(m) => write!(f, "capacity error: {m}"),
            Error::Format { offset, msg } => write!(f, "format error at byte {offset}: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
