use thiserror::Error;

/// Error type shared across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("out-of-vocabulary action phrase: {phrase:?} (family: {family})")]
    OutOfVocabulary { family: String, phrase: String },

    #[error("annotation error for sample {sample_id}: {message}")]
    Annotation { sample_id: String, message: String },

    #[error("encoding error in field {field}: {message}")]
    Encoding { field: String, message: String },

    #[error("store error: {0}")]
    Store(String),

    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("state error: {0}")]
    State(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("client error: {0}")]
    Client(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
