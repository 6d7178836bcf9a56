//! Whole-pipeline configuration: UTF-8 JSON with sections
//! `{data, encoder, decoder, predictor, train}`. Unknown keys are rejected,
//! and every offending key is listed in the error.

use crate::data::{EpisodeOptions, GeneratorConfig};
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::ModelError;
use crate::predictor::PredictorConfig;
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub blocks: usize,
    pub points_per_block: usize,
    pub seed: u64,
    /// Two-fold cross-validation fold whose classes are held out for testing.
    pub fold: u8,
    pub min_class_fraction: f64,
    /// Optional per-episode re-sampling of blocks to this many points.
    pub episode_points: Option<usize>,
    pub generator: GeneratorConfig,
}

impl DataConfig {
    pub fn episode_options(&self) -> EpisodeOptions {
        EpisodeOptions {
            min_class_fraction: self.min_class_fraction,
            episode_points: self.episode_points,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.blocks == 0 || self.points_per_block == 0 {
            return Err(ModelError::BadConfig(
                "blocks and points_per_block must be >= 1".into(),
            ));
        }
        if self.fold > 1 {
            return Err(ModelError::BadConfig("fold must be 0 or 1".into()));
        }
        if !(0.0..1.0).contains(&self.min_class_fraction) {
            return Err(ModelError::BadConfig(
                "min_class_fraction must be in [0, 1)".into(),
            ));
        }
        self.generator.validate()?;
        Ok(())
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            blocks: 200,
            points_per_block: 2048,
            seed: 7,
            fold: 0,
            min_class_fraction: 0.02,
            episode_points: None,
            generator: GeneratorConfig::default_indoor(),
        }
    }
}

/// Full resolved pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub predictor: PredictorConfig,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            predictor: PredictorConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Semantic(#[from] ModelError),
}

/// Schema tree used to collect every unknown key before deserializing.
enum Schema {
    Object(&'static [(&'static str, Schema)]),
    ArrayOf(&'static Schema),
    Ref(&'static Schema),
    Leaf,
}

static CLASS_SPEC_SCHEMA: Schema = Schema::Object(&[
    ("name", Schema::Leaf),
    ("kind", Schema::Leaf),
    ("size_min", Schema::Leaf),
    ("size_max", Schema::Leaf),
    ("color_mean", Schema::Leaf),
    ("color_std", Schema::Leaf),
    ("instance_color_std", Schema::Leaf),
    ("points_per_area", Schema::Leaf),
]);

static GENERATOR_SCHEMA: Schema = Schema::Object(&[
    ("extent", Schema::Leaf),
    ("jitter", Schema::Leaf),
    ("classes_per_scene", Schema::Leaf),
    ("background_points", Schema::Leaf),
    ("min_points_per_instance", Schema::Leaf),
    ("max_points_per_instance", Schema::Leaf),
    ("density_scale", Schema::Leaf),
    ("extra_dim", Schema::Leaf),
    ("classes", Schema::ArrayOf(&CLASS_SPEC_SCHEMA)),
]);

static ROOT_SCHEMA: Schema = Schema::Object(&[
    (
        "data",
        Schema::Object(&[
            ("blocks", Schema::Leaf),
            ("points_per_block", Schema::Leaf),
            ("seed", Schema::Leaf),
            ("fold", Schema::Leaf),
            ("min_class_fraction", Schema::Leaf),
            ("episode_points", Schema::Leaf),
            ("generator", Schema::Ref(&GENERATOR_SCHEMA)),
        ]),
    ),
    (
        "encoder",
        Schema::Object(&[
            ("k_neighbors", Schema::Leaf),
            ("edgeconv_channels", Schema::Leaf),
            ("attention_dim", Schema::Leaf),
            ("output_dim", Schema::Leaf),
            ("leaky_slope", Schema::Leaf),
            ("feature_knn", Schema::Leaf),
        ]),
    ),
    (
        "decoder",
        Schema::Object(&[
            ("num_blocks", Schema::Leaf),
            ("ffn_hidden", Schema::Leaf),
            ("distill_temperature", Schema::Leaf),
            ("scale_scores", Schema::Leaf),
            ("symmetric_distill", Schema::Leaf),
            ("rectification", Schema::Leaf),
            ("p2q_attention", Schema::Leaf),
            ("distillation", Schema::Leaf),
        ]),
    ),
    (
        "predictor",
        Schema::Object(&[("alpha", Schema::Leaf), ("distance", Schema::Leaf)]),
    ),
    (
        "train",
        Schema::Object(&[
            ("gamma", Schema::Leaf),
            ("n_way", Schema::Leaf),
            ("k_shot", Schema::Leaf),
            ("pretrain_epochs", Schema::Leaf),
            ("pretrain_batch", Schema::Leaf),
            ("pretrain_lr", Schema::Leaf),
            ("meta_iterations", Schema::Leaf),
            ("learning_rate", Schema::Leaf),
            ("lr_halving_interval", Schema::Leaf),
            ("beta1", Schema::Leaf),
            ("beta2", Schema::Leaf),
            ("seed", Schema::Leaf),
            ("eval_seed", Schema::Leaf),
            ("eval_episodes", Schema::Leaf),
            ("eval_interval", Schema::Leaf),
            ("checkpoint_interval", Schema::Leaf),
            ("grad_clip", Schema::Leaf),
        ]),
    ),
]);

fn collect_unknown(value: &serde_json::Value, schema: &Schema, path: &str, out: &mut Vec<String>) {
    match schema {
        Schema::Leaf => {}
        Schema::Ref(inner) => collect_unknown(value, inner, path, out),
        Schema::ArrayOf(item) => {
            if let Some(items) = value.as_array() {
                for (i, v) in items.iter().enumerate() {
                    collect_unknown(v, item, &format!("{path}[{i}]"), out);
                }
            }
        }
        Schema::Object(fields) => {
            if let Some(map) = value.as_object() {
                for (key, v) in map {
                    match fields.iter().find(|(name, _)| name == key) {
                        Some((_, child)) => {
                            let sub = if path.is_empty() {
                                key.clone()
                            } else {
                                format!("{path}.{key}")
                            };
                            collect_unknown(v, child, &sub, out);
                        }
                        None => {
                            let sub = if path.is_empty() {
                                key.clone()
                            } else {
                                format!("{path}.{key}")
                            };
                            out.push(sub);
                        }
                    }
                }
            }
        }
    }
}

impl Config {
    /// Parse and validate a JSON config. Missing sections/fields take their
    /// defaults; unknown keys anywhere are an error listing every violation.
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut unknown = Vec::new();
        collect_unknown(&value, &ROOT_SCHEMA, "", &mut unknown);
        if !unknown.is_empty() {
            unknown.sort();
            return Err(ConfigError::UnknownKeys(unknown));
        }
        let cfg: Config =
            serde_json::from_value(value).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.data.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.predictor.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
