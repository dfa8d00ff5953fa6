use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate codeword for message {message}: raw norm {norm:e}")]
    DegenerateCodeword { message: usize, norm: f64 },

    #[error("reverse chain produced a non-finite value at step {step}")]
    Generation { step: usize },

    #[error("config line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("config field `{field}`: {msg}")]
    ConfigField { field: String, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training aborted in phase {phase}, {stage} epoch {epoch}: {source}")]
    Training {
        phase: usize,
        stage: &'static str,
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
