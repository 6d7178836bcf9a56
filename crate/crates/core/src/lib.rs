//! Few-shot point-cloud semantic segmentation with dynamic prototype
//! adaptation.
//!
//! The pipeline: a synthetic scene corpus feeds episodic N-way K-shot
//! sampling; a graph-convolution encoder with self-attention produces
//! per-point features; masked average pooling builds vanilla prototypes;
//! the prototype decoder rectifies them against query statistics, attends
//! them to the target query, and regularizes the adaptation with prototype
//! distillation; metric-based matching predicts per-point masks. Everything
//! differentiable runs on a small reverse-mode tape over `f64` arrays so
//! gradients can be checked against finite differences.

pub mod autodiff;
pub mod config;
pub mod container;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod predictor;
pub mod prototypes;
pub mod seeds;
pub mod training;

pub use config::{Config, ConfigError, DataConfig};
pub use data::{
    BinaryMask, ClassSplit, CorpusManifest, DataError, Episode, EpisodeOptions, GeneratorConfig,
    LabeledPointCloud, Phase,
};
pub use decoder::{DecoderConfig, DecoderTrace};
pub use encoder::{EncoderConfig, FeatureMatrix};
pub use error::ModelError;
pub use metrics::IoUReport;
pub use params::ParamStore;
pub use predictor::{DistanceKind, MaskLogits, PredictorConfig};
pub use prototypes::{PrototypeSet, PrototypeStage};
pub use training::{
    AblationTable, DpaModel, EpisodePredictor, EvalReport, SweepParam, SweepTable, TrainConfig,
    TrainLog,
};
