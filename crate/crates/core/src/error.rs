use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("label {label} at index {index} is outside [0, {classes})")]
    Label { index: usize, label: usize, classes: usize },

    #[error("distribution error: {0}")]
    Distribution(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("feature budget exceeded: {got} features > d_max {max}; apply feature selection first")]
    FeatureBudget { got: usize, max: usize },

    #[error("class budget exceeded: {got} classes > c_max {max}; retrain the decoder with extend_classes")]
    ClassBudget { got: usize, max: usize },

    #[error("context capacity exceeded: {tokens} tokens > n_ctx_max {max}")]
    Capacity { tokens: usize, max: usize },

    #[error("degenerate task: {0}")]
    DegenerateTask(String),

    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: usize, loss: f64 },

    #[error("prompt of length {p} cannot hold all {classes} classes under equal label init")]
    PromptTooShort { p: usize, classes: usize },

    #[error("class extension to {requested} classes is not needed (c_max = {c_max}); use class_slice")]
    NoExtensionNeeded { requested: usize, c_max: usize },

    #[error("group {0} is empty")]
    EmptyGroup(&'static str),

    #[error("transform error: {0}")]
    Transform(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("task error: {0}")]
    Task(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("incomplete results: missing ({dataset}, {algorithm}, fold {fold})")]
    MissingCell {
        dataset: String,
        algorithm: String,
        fold: usize,
    },

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("all {} candidates failed: {}", .0.len(), summarize_failures(.0))]
    AllCandidatesFailed(Vec<(usize, String)>),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn summarize_failures(failures: &[(usize, String)]) -> String {
    failures
        .iter()
        .map(|(i, msg)| format!("#{i}: {msg}"))
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
