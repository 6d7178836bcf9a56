//! Errors raised by the model pipeline (encoder, prototypes, decoder,
//! predictor, training).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("k = {k} neighbors requested but the cloud has only {t} points")]
    KTooLarge { k: usize, t: usize },
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite values encountered in {op}")]
    NonFinite { op: &'static str },
    #[error("config/weight mismatch: parameter '{name}' {reason}")]
    ConfigWeightMismatch { name: String, reason: String },
    #[error("all {shots} support masks for class {class} are empty")]
    EmptyPrototype { class: usize, shots: usize },
    #[error("no background points in any of the {shots} support shots")]
    NoBackgroundPoints { shots: usize },
    #[error("episode has {queries} encoded queries, expected n_way = {n_way}")]
    QueryCountMismatch { queries: usize, n_way: usize },
    #[error("distillation temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("amplification factor alpha must be positive, got {0}")]
    BadAlpha(f64),
    #[error("ground-truth label {label} outside episode-local range 0..={n_way}")]
    BadGroundTruth { label: i32, n_way: usize },
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Container(#[from] crate::container::ContainerError),
}
