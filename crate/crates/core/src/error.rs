use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum MeterError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("no confident samples: every pseudo label in the pool is Unknown")]
    NoConfidentSamples,

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("stream error at step {step}: {source}")]
    Stream {
        step: usize,
        #[source]
        source: Box<MeterError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MeterError>;

impl MeterError {
    pub fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        MeterError::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn at_step(self, step: usize) -> Self {
        MeterError::Stream {
            step,
            source: Box::new(self),
        }
    }
}
