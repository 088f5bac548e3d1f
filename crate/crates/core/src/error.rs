use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("impression position {got} does not follow last watched position {last}")]
    NonMonotonePosition { last: u32, got: u32 },

    #[error("history record lies in the future of the ranking context: {0}")]
    Clock(String),

    #[error("candidate index {0} appears more than once in the ordered prefix")]
    DuplicateCandidate(usize),

    #[error("candidate index {index} out of range for {len} candidates")]
    CandidateIndex { index: usize, len: usize },

    #[error("feature schema mismatch: model expects {expected:?}, input has {found:?}")]
    SchemaMismatch { expected: String, found: String },

    #[error("cannot show {n_show} videos from {candidates} candidates")]
    TooFewCandidates { candidates: usize, n_show: usize },

    #[error("brute-force search is limited to {max} candidates, got {got}")]
    OracleTooLarge { got: usize, max: usize },

    #[error("non-finite gradient in tensor {tensor} at element {index}")]
    NonFiniteGradient { tensor: String, index: usize },

    #[error("model corrupt or outdated: digest mismatch (expected {expected}, computed {computed})")]
    DigestMismatch { expected: String, computed: String },

    #[error("malformed weights file: {0}")]
    Format(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Contract violations exit with code 1, configuration and IO problems with 2.
    pub fn is_contract_violation(&self) -> bool {
        !matches!(self, Error::Config(_) | Error::Io(_) | Error::Json(_))
    }
}
