use thiserror::Error;

/// Errors shared across the crate. Each variant carries a stable machine
/// code (see [`AvError::code`]) so CLI frontends can emit parsable prefixes.
#[derive(Debug, Error)]
pub enum AvError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("pair construction error: {0}")]
    PairConstruction(String),

    #[error("empty batch: {0}")]
    Batch(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("pretraining failed: {0}")]
    PretrainingFailure(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("non-finite loss at step {step} (mode {mode}): {detail}")]
    NonFiniteLoss {
        step: usize,
        mode: String,
        detail: String,
    },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("corpus format error: {0}")]
    CorpusFormat(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl AvError {
    /// Stable machine-parsable code for this error class.
    pub fn code(&self) -> &'static str {
        match self {
            AvError::Shape(_) => "E_SHAPE",
            AvError::Config(_) => "E_CONFIG",
            AvError::Mode(_) => "E_MODE",
            AvError::DegenerateInput(_) => "E_DEGENERATE_INPUT",
            AvError::PairConstruction(_) => "E_PAIR_CONSTRUCTION",
            AvError::Batch(_) => "E_BATCH",
            AvError::UndefinedMetric(_) => "E_UNDEFINED_METRIC",
            AvError::PretrainingFailure(_) => "E_PRETRAIN_FAILURE",
            AvError::MissingArtifact(_) => "E_MISSING_ARTIFACT",
            AvError::NonFiniteLoss { .. } => "E_NONFINITE_LOSS",
            AvError::CheckpointFormat(_) => "E_CHECKPOINT_FORMAT",
            AvError::CorpusFormat(_) => "E_CORPUS_FORMAT",
            AvError::Io(_) => "E_IO",
            AvError::Json(_) => "E_JSON",
        }
    }
}

pub type Result<T> = std::result::Result<T, AvError>;
