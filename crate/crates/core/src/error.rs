use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid label map: {0}")]
    LabelMap(String),
    #[error("invalid example {index}: {message}")]
    InvalidExample { index: usize, message: String },
    #[error("undefined ratio: class {class:?} has no examples")]
    UndefinedRatio { class: String },
    #[error("infinite divergence: class {class} has zero mass under q")]
    InfiniteDivergence { class: usize },
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("insufficient examples for class {class:?}: need {needed}, have {available}")]
    InsufficientExamples {
        class: String,
        needed: usize,
        available: usize,
    },
    #[error("invalid split config: {0}")]
    SplitConfig(String),
    #[error("ordering violated: split KL values {0:?} are not strictly decreasing")]
    OrderingViolated(Vec<f64>),
    #[error("invalid split plan: {0}")]
    InvalidPlan(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("task {task}: {source}")]
    Task {
        task: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
