//! Error type shared by all modules.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes of the attack/evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Two arrays that must agree in shape do not.
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// A typed invariant was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A parameter is outside its legal range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A feature tap name does not resolve on the model.
    #[error("unknown tap `{tap}` on model `{model}`")]
    UnknownTap { tap: String, model: String },

    /// A named entity (model, attack, loss, axis) is not registered.
    #[error("lookup failed: {0}")]
    Lookup(String),

    /// The requested gradient path is not differentiable on this model.
    #[error("capability error: {0}")]
    Capability(String),

    /// The aggregate gradient summed to exactly zero and cannot be normalized.
    #[error("degenerate aggregate gradient (all-zero sum)")]
    DegenerateGradient,

    /// An attack loss produced an all-zero input gradient.
    #[error("zero input gradient")]
    ZeroGradient,

    /// Training finished below the configured accuracy floor.
    #[error("training failed: {arch} ({mode}) reached accuracy {accuracy:.4} < floor {floor:.4}")]
    TrainingFailed {
        arch: String,
        mode: String,
        accuracy: f64,
        floor: f64,
    },

    /// Success rate is undefined because no image was clean-correct.
    #[error("undefined success rate: empty clean-correct set")]
    UndefinedRate,

    /// A configuration is internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: &[usize],
        got: &[usize],
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
