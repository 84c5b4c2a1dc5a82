use thiserror::Error;

use crate::training::StepReport;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,

    #[error("degenerate feature vector")]
    DegenerateFeature,

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("identity decomposition requires expert_width = d_model")]
    IdentityRequiresSquare,

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("{0}")]
    Config(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("forward_switch requires e_active = 1, got {0}")]
    NotSingleExpert(usize),

    #[error("architecture lacks experts")]
    NoExperts,

    #[error("trace/batch mismatch: {0}")]
    TraceMismatch(String),

    /// A non-finite gradient or parameter showed up during optimization.
    #[error("diverged at step {step}")]
    Diverged {
        step: usize,
        last_finite: Option<Box<StepReport>>,
    },

    #[error("{0}")]
    Precondition(String),

    #[error("degenerate baseline")]
    DegenerateBaseline,

    #[error("batch has no token labels")]
    NoLabels,

    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(offset: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }
}
