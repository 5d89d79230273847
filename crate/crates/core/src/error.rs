use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("matrix is not positive definite: pivot {pivot} is {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("row {row} has zero L2 norm")]
    ZeroNorm { row: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("prompt for item {item_id} does not fit the model context: {source}")]
    PromptTooLong {
        item_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid intervention: {0}")]
    InvalidIntervention(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f32 },

    #[error("character {0:?} is not in the tokenizer alphabet")]
    UnknownChar(char),

    #[error("item ids do not match: {0}")]
    ItemMismatch(String),

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("no teacher activation for item {0}")]
    MissingActivation(String),

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("could not extract a number: {0}")]
    NumericParse(String),

    #[error("bad file format in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("required artifact is missing: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("config serialize error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::DimensionMismatch {
        op,
        detail: detail.into(),
    }
}
