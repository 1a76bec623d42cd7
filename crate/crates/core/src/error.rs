use thiserror::Error;

/// Errors produced anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid convolution spec: {0}")]
    ConvSpec(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("gradient tape: {0}")]
    Tape(String),

    /// A branch bundle violates a mergeability condition; `condition` names it.
    #[error("cannot merge bundle at `{path}`: {condition}")]
    Unmergeable { path: String, condition: String },

    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("signature mismatch: {0}")]
    Signature(String),

    #[error("parameter `{0}` not found")]
    MissingParam(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
