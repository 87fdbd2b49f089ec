use std::path::PathBuf;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid alphabet: {0}")]
    Alphabet(String),

    #[error("empty response")]
    EmptyResponse,

    #[error("empty group")]
    EmptyGroup,

    #[error("token {token} is outside the vocabulary of size {vocab}")]
    OutOfVocab { token: u32, vocab: usize },

    #[error("length mismatch in {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("policy shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("enumeration needs {required} sequences, cap is {cap}")]
    EnumerationCap { required: u128, cap: u64 },

    #[error("prefix {0:?} is unreachable under the reference policy")]
    UnreachablePrefix(Vec<u32>),

    #[error("group rewards have zero standard deviation and std_eps is 0")]
    ZeroStd,

    #[error("invalid index {index}: expected a value in [{lo}, {hi}]")]
    IndexOutOfRange { index: usize, lo: usize, hi: usize },

    #[error("invalid step pair ({l}, {p}) for a response of length {len}: need l < p <= len")]
    InvalidPair { l: usize, p: usize, len: usize },

    #[error("malformed prompt: {0}")]
    MalformedPrompt(String),

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unsupported checkpoint format version {0}")]
    FormatVersion(u32),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
