use std::io;

use thiserror::Error;
use tokensplit_tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("word `{0}` is not in the vocabulary")]
    OutOfVocabulary(String),

    #[error("word `{word}` does not occur in prompt [{}]", tokens.join(", "))]
    WordNotInPrompt { word: String, tokens: Vec<String> },

    #[error("{0}")]
    Format(String),

    #[error("{what} has format version {found}; this build reads up to {supported}")]
    UnsupportedVersion {
        what: &'static str,
        found: u32,
        supported: u32,
    },

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("non-finite value at step {step}: {detail}")]
    NumericFailure {
        step: usize,
        detail: String,
        /// Aggregated attention maps at the failing step, one per token.
        maps: Vec<Vec<f64>>,
    },

    #[error("variant `{0}` modifies keys and requires the explicit ablation flag")]
    AblationGuard(String),

    #[error("concept `{0}` already exists (use overwrite to replace it)")]
    ConceptExists(String),

    #[error("concept `{0}` not found")]
    ConceptMissing(String),

    #[error("scene placement failed after {attempts} attempts: canvas too small")]
    Placement { attempts: usize },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for failures caused by NaN or divergence rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::NumericFailure { .. })
    }
}
