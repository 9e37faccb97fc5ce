//! Crate-wide error type.
//!
//! Every fallible operation in the pipeline returns [`Result`]. Stage
//! orchestration wraps lower-level failures in [`Error::Stage`] so batch
//! ledgers can report which module a prompt died in.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // prompt handling
    #[error("unparsable prompt: {0}")]
    UnparsablePrompt(String),
    #[error("tokenization mismatch: {0}")]
    TokenizationMismatch(String),
    #[error("invalid triplet: {0}")]
    InvalidTriplet(String),

    // attention / tensor shapes
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("resolution mismatch: {0}")]
    ResolutionMismatch(String),
    #[error("value out of range: {0}")]
    ValueOutOfRange(String),

    // backbone
    #[error("backbone failure: {0}")]
    BackboneFailure(String),
    #[error("hook shape mismatch: {0}")]
    HookShapeMismatch(String),
    #[error("sampler schedule exhausted at step {0}")]
    ScheduleExhausted(usize),
    #[error("candidate count must be at least 1")]
    CandidateCountZero,

    // reasoning agents
    #[error("degenerate attention map: all values equal")]
    DegenerateMap,
    #[error("no human detected in image")]
    NoHumanDetected,
    #[error("insufficient keypoints: {got} valid, need at least {need}")]
    InsufficientKeypoints { got: usize, need: usize },
    #[error("unparsable agent reply: {0}")]
    UnparsableAgentReply(String),
    #[error("VLM unavailable: {0}")]
    VlmUnavailable(String),
    #[error("box out of range: {0}")]
    BoxOutOfRange(String),

    // corrector
    #[error("non-finite gradient at step {0}")]
    NonFiniteGradient(usize),
    #[error("divergence detected: loss grew for {0} consecutive active steps")]
    DivergenceDetected(usize),
    #[error("box too small: rasterizes to zero cells at resolution {0}")]
    BoxTooSmall(usize),

    // evaluation
    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(String),
    #[error("empty batch: no records to aggregate")]
    EmptyBatch,

    // runner
    #[error("prompt file missing or empty: {0}")]
    PromptFileMissing(String),
    #[error("run not found: {0}")]
    RunNotFound(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{stage} stage: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Tag an error with the pipeline stage it surfaced from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
