use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum DtpError {
    #[error("shape mismatch: {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("non-deterministic function: two evaluations of the same input differ")]
    NonDeterministic,

    #[error("training diverged at step {step}: loss became non-finite")]
    TrainingDiverged { step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("image error: {0}")]
    Image(String),

    // The source carries the detail; keeping it out of the message avoids
    // printing it twice in rendered error chains.
    #[error("io error")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DtpError>;

impl DtpError {
    pub fn shape(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        DtpError::ShapeMismatch {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
