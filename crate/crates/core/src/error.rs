use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("row {row}: class index {index} out of range for {classes} classes")]
    IndexOutOfRange {
        row: usize,
        index: usize,
        classes: usize,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown token {token} (vocabulary has {size} regular symbols)")]
    Vocabulary { token: usize, size: usize },
    #[error("tree level {level} out of range (depth is {depth})")]
    Level { level: usize, depth: usize },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("malformed hypothesis: {0}")]
    MalformedHypothesis(String),
    #[error("target of length {len} is infeasible for {frames} frames")]
    InfeasibleTarget { len: usize, frames: usize },
    #[error("brute-force enumeration refused: {frames} frames x {classes} classes exceeds the cap")]
    EnumerationTooLarge { frames: usize, classes: usize },
    #[error("loss function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors that stem from numeric failure rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::NonDeterministic { .. })
    }
}
