//! Error types shared across the pipeline stages.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("backend client error: {0}")]
    Client(String),
    #[error("could not parse completion: {reason}; raw text: {raw:?}")]
    Parse { reason: String, raw: String },
    #[error("missing or unbalanced tag: {0}")]
    Tag(String),
    #[error("malformed rule map JSON: {0}")]
    Json(String),
    #[error("completion violated contract after retry: {0}")]
    Validation(String),
    #[error("no valid score token carries a finite logit")]
    EmptySupport,
    #[error("value out of range: {0}")]
    Range(String),
    #[error("fact list is empty")]
    EmptyFactList,
    #[error("negative loss component: {0}")]
    NegativeComponent(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid diffusion timestep: {0}")]
    Schedule(String),
    #[error("model incompatible with injection branch: {0}")]
    IncompatibleModel(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("realism classifier error: {0}")]
    Classifier(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
