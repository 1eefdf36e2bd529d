use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("membership balance error: number of models must be even and >= 2, got {0}")]
    Balance(usize),

    #[error("audit set must contain at least one sample")]
    EmptyAudit,

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("need at least 2 {side} scores, got {count}")]
    InsufficientScores { side: &'static str, count: usize },

    #[error("zero-norm output vector")]
    ZeroNormOutput,

    #[error("ROC needs at least one positive and one negative record")]
    OneClass,

    #[error("operation not supported by model kind {0}")]
    Unsupported(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
