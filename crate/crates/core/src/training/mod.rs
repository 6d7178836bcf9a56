//! The three-stage protocol: backbone pretraining on seen classes, episodic
//! meta-training with the combined loss, and meta-testing on unseen classes.
//! Also hosts the ablation grid and hyper-parameter sweep drivers.

use crate::autodiff::{Tape, Var};
use crate::config::Config;
use crate::data::{
    sample_episode, ClassSplit, Episode, EpisodeOptions, LabeledPointCloud, Phase,
};
use crate::decoder::{self, decode_on, DecoderConfig, EpisodeFeatures};
use crate::encoder::{self, encode_on, EncoderConfig};
use crate::error::ModelError;
use crate::metrics::{episode_miou, IoUReport};
use crate::optim::{clip_grad_norm, lr_at, Adam};
use crate::params::{BoundParams, ParamStore};
use crate::predictor::{mask_logits_on, predict_mask, MaskLogits, PredictorConfig};
use crate::prototypes::build_prototype_set_on;
use crate::seeds::{self, stream};
use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Distillation loss weight.
    pub gamma: f64,
    pub n_way: usize,
    pub k_shot: usize,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub meta_iterations: usize,
    pub learning_rate: f64,
    /// Halve the learning rate every this many iterations.
    pub lr_halving_interval: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Fixed and distinct from the training seed so evaluation is a pure
    /// function of the weights.
    pub eval_seed: u64,
    pub eval_episodes: usize,
    /// Evaluate on held-out episodes every this many iterations (0 = off).
    pub eval_interval: usize,
    /// Invoke the checkpoint hook every this many iterations (0 = off).
    pub checkpoint_interval: usize,
    /// Max-norm gradient clipping (None = off).
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            n_way: 2,
            k_shot: 1,
            pretrain_epochs: 20,
            pretrain_batch: 8,
            pretrain_lr: 0.001,
            meta_iterations: 2000,
            learning_rate: 0.001,
            lr_halving_interval: 500,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            eval_seed: 0x5eed_e7a1,
            eval_episodes: 100,
            eval_interval: 0,
            checkpoint_interval: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.gamma < 0.0 {
            return Err(ModelError::BadConfig("gamma must be >= 0".into()));
        }
        if self.learning_rate <= 0.0 || self.pretrain_lr <= 0.0 {
            return Err(ModelError::BadConfig("learning rates must be > 0".into()));
        }
        if self.n_way < 2 || self.k_shot < 1 {
            return Err(ModelError::BadConfig(
                "n_way must be >= 2 and k_shot >= 1".into(),
            ));
        }
        if self.lr_halving_interval == 0 {
            return Err(ModelError::BadConfig(
                "lr_halving_interval must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One meta-training iteration record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub ce: f64,
    pub distill: f64,
    pub total: f64,
    pub lr: f64,
}

/// Held-out evaluation checkpoint during meta-training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub iterations: Vec<IterRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    /// Line-delimited JSON: one record per line, eval rows tagged.
    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for rec in &self.iterations {
            let mut value = serde_json::to_value(rec).expect("serializable record");
            value["kind"] = "iteration".into();
            writeln!(w, "{value}")?;
        }
        for rec in &self.evals {
            let mut value = serde_json::to_value(rec).expect("serializable record");
            value["kind"] = "eval".into();
            writeln!(w, "{value}")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let mut log = TrainLog::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let value: serde_json::Value = serde_json::from_str(line)?;
            match value.get("kind").and_then(|k| k.as_str()) {
                Some("eval") => log.evals.push(serde_json::from_value(value.clone())?),
                _ => log.iterations.push(serde_json::from_value(value.clone())?),
            }
        }
        Ok(log)
    }
}

/// Mean per-point cross-entropy of row-stochastic logits against
/// episode-local ground truth, plus `gamma` times the distillation loss,
/// averaged over the episode's query clouds.
pub fn total_loss(
    logits: &[MaskLogits],
    truths: &[Array1<i32>],
    distill_loss: f64,
    gamma: f64,
) -> Result<f64, ModelError> {
    assert_eq!(logits.len(), truths.len(), "query count mismatch");
    assert!(!logits.is_empty(), "at least one query required");
    let mut ce_sum = 0.0;
    for (l, t) in logits.iter().zip(truths) {
        let n_way = l.classes() - 1;
        let mut q_sum = 0.0;
        for (r, &label) in t.iter().enumerate() {
            if label < 0 || label as usize > n_way {
                return Err(ModelError::BadGroundTruth { label, n_way });
            }
            q_sum -= l.values[[r, label as usize]].max(1e-12).ln();
        }
        ce_sum += q_sum / t.len() as f64;
    }
    let ce = ce_sum / logits.len() as f64;
    Ok(ce + gamma * distill_loss)
}

/// Encode every support shot (masked) and query (unmasked) of an episode.
pub fn encode_episode_on(
    tape: &mut Tape,
    episode: &Episode,
    enc_cfg: &EncoderConfig,
    bound: &BoundParams,
) -> Result<EpisodeFeatures, ModelError> {
    let mut support = Vec::with_capacity(episode.n_way);
    for local in 1..=episode.n_way {
        let entries = episode.support_for(local);
        let mut shots = Vec::with_capacity(entries.len());
        for e in entries {
            shots.push(encode_on(tape, &e.cloud, Some(&e.mask), enc_cfg, bound)?);
        }
        support.push(shots);
    }
    let mut queries = Vec::with_capacity(episode.query.len());
    for q in &episode.query {
        queries.push(encode_on(tape, &q.cloud, None, enc_cfg, bound)?);
    }
    Ok(EpisodeFeatures { support, queries })
}

fn cross_entropy_on(
    tape: &mut Tape,
    probs: Var,
    truth: &Array1<i32>,
    n_way: usize,
) -> Result<Var, ModelError> {
    let classes = tape.shape(probs)[1];
    debug_assert_eq!(classes, n_way + 1);
    let mut idx = Vec::with_capacity(truth.len());
    for &label in truth.iter() {
        if label < 0 || label as usize > n_way {
            return Err(ModelError::BadGroundTruth { label, n_way });
        }
        idx.push(label as usize);
    }
    let picked = tape.select_per_row(probs, idx);
    let logp = tape.ln_clamped(picked, 1e-12);
    let mean = tape.mean_all(logp);
    Ok(tape.scale(mean, -1.0))
}

/// Differentiable episode loss: encodes, builds prototypes, decodes per
/// query, and returns `(total, ce, distill)` nodes.
pub fn episode_loss_on(
    tape: &mut Tape,
    episode: &Episode,
    enc_cfg: &EncoderConfig,
    dec_cfg: &DecoderConfig,
    pred_cfg: &PredictorConfig,
    gamma: f64,
    bound: &BoundParams,
) -> Result<(Var, Var, Var), ModelError> {
    let features = encode_episode_on(tape, episode, enc_cfg, bound)?;
    let masks: Vec<Vec<&crate::data::BinaryMask>> = (1..=episode.n_way)
        .map(|local| {
            episode
                .support_for(local)
                .into_iter()
                .map(|e| &e.mask)
                .collect()
        })
        .collect();
    let vanilla = build_prototype_set_on(tape, &features.support, &masks)?;

    let mut ce_terms = Vec::with_capacity(episode.query.len());
    let mut distill_terms = Vec::with_capacity(episode.query.len());
    for (qi, q) in episode.query.iter().enumerate() {
        let (task, distill, _trace) =
            decode_on(tape, &vanilla, &features, qi, dec_cfg, bound)?;
        let stacked = task.stacked(tape);
        let probs = mask_logits_on(tape, features.queries[qi], stacked, pred_cfg)?;
        ce_terms.push(cross_entropy_on(tape, probs, &q.truth, episode.n_way)?);
        distill_terms.push(distill);
    }
    let ce = tape.mean_of(&ce_terms);
    let distill = tape.mean_of(&distill_terms);
    let weighted = tape.scale(distill, gamma);
    let total = tape.add(ce, weighted);
    Ok((total, ce, distill))
}

/// Initialize encoder + decoder parameters for the configured model.
pub fn init_model_params(cfg: &Config, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    encoder::init_params(&cfg.encoder, cfg.data.generator.extra_dim, &mut store, seed);
    decoder::init_params(&cfg.decoder, cfg.encoder.output_dim, &mut store, seed);
    store
}

/// Backbone pretraining: encoder plus a throwaway per-point linear
/// classifier over seen classes + background, trained with cross-entropy on
/// corpus blocks. Returns encoder weights only and the per-batch losses.
pub fn pretrain(
    corpus: &[LabeledPointCloud],
    split: &ClassSplit,
    cfg: &Config,
) -> Result<(ParamStore, Vec<f64>), ModelError> {
    cfg.train.validate()?;
    cfg.encoder.validate()?;
    if corpus.is_empty() {
        return Err(ModelError::Data(crate::data::DataError::EmptyCloud));
    }
    if split.seen.is_empty() {
        return Err(ModelError::BadConfig("pretraining needs seen classes".into()));
    }
    let seen: Vec<u32> = split.seen.iter().copied().collect();
    let n_out = seen.len() + 1;
    let d = cfg.encoder.output_dim;
    let seed = cfg.train.seed;

    let mut params = ParamStore::new();
    encoder::init_params(&cfg.encoder, cfg.data.generator.extra_dim, &mut params, seed);
    params.init_uniform("pretrain/classifier/weight", &[d, n_out], d, seed);
    params.init_zeros("pretrain/classifier/bias", &[1, n_out]);

    let mut opt = Adam::new(cfg.train.beta1, cfg.train.beta2);
    let mut losses = Vec::new();
    for epoch in 0..cfg.train.pretrain_epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut rng = seeds::rng(&[seed, stream::PRETRAIN, epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(cfg.train.pretrain_batch.max(1)) {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &params);
            let w = bound.var("pretrain/classifier/weight");
            let b = bound.var("pretrain/classifier/bias");
            let mut block_losses = Vec::with_capacity(batch.len());
            for &bi in batch {
                let feats = encode_on(&mut tape, &corpus[bi], None, &cfg.encoder, &bound)?;
                let logits = tape.matmul(feats, w);
                let logits = tape.add(logits, b);
                let logp = tape.log_softmax_rows(logits);
                let idx: Vec<usize> = corpus[bi]
                    .labels
                    .iter()
                    .map(|&l| seen.iter().position(|&s| s as i32 == l).map_or(0, |p| p + 1))
                    .collect();
                let picked = tape.select_per_row(logp, idx);
                let mean = tape.mean_all(picked);
                block_losses.push(tape.scale(mean, -1.0));
            }
            let loss = tape.mean_of(&block_losses);
            let grads = tape.backward(loss);
            let named = bound.gradients(&grads);
            opt.step(&mut params, &named, cfg.train.pretrain_lr);
            losses.push(tape.scalar_value(loss));
        }
    }
    params.remove_namespace("pretrain/");
    Ok((params, losses))
}

fn train_step(
    params: &ParamStore,
    episode: &Episode,
    cfg: &Config,
) -> Result<(BTreeMap<String, crate::autodiff::Arr>, f64, f64, f64), ModelError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let (total, ce, distill) = episode_loss_on(
        &mut tape,
        episode,
        &cfg.encoder,
        &cfg.decoder,
        &cfg.predictor,
        cfg.train.gamma,
        &bound,
    )?;
    let grads = tape.backward(total);
    let named = bound.gradients(&grads);
    Ok((
        named,
        tape.scalar_value(ce),
        tape.scalar_value(distill),
        tape.scalar_value(total),
    ))
}

/// Episodic meta-training. `initial_encoder` (usually from [`pretrain`])
/// replaces the fresh encoder init; decoder weights always start fresh.
pub fn meta_train(
    corpus: &[LabeledPointCloud],
    split: &ClassSplit,
    cfg: &Config,
    initial_encoder: Option<&ParamStore>,
    mut on_checkpoint: impl FnMut(usize, &ParamStore),
) -> Result<(ParamStore, TrainLog), ModelError> {
    cfg.train.validate()?;
    cfg.encoder.validate()?;
    cfg.decoder.validate()?;
    cfg.predictor.validate()?;
    let mut params = init_model_params(cfg, cfg.train.seed);
    if let Some(enc) = initial_encoder {
        params.adopt_namespace(enc, "encoder/");
        encoder::validate_params(&cfg.encoder, cfg.data.generator.extra_dim, &params)?;
    }
    let opts = cfg.data.episode_options();
    let mut opt = Adam::new(cfg.train.beta1, cfg.train.beta2);
    let mut log = TrainLog::default();

    for iter in 0..cfg.train.meta_iterations {
        let episode_seed = seeds::mix(&[cfg.train.seed, stream::META_TRAIN, iter as u64]);
        let episode = sample_episode(
            corpus,
            split,
            Phase::Train,
            cfg.train.n_way,
            cfg.train.k_shot,
            episode_seed,
            &opts,
        )?;
        let (mut grads, ce, distill, total) = train_step(&params, &episode, cfg)?;
        if let Some(max_norm) = cfg.train.grad_clip {
            clip_grad_norm(&mut grads, max_norm);
        }
        let lr = lr_at(iter, cfg.train.learning_rate, cfg.train.lr_halving_interval);
        opt.step(&mut params, &grads, lr);
        log.iterations.push(IterRecord {
            iteration: iter,
            ce,
            distill,
            total,
            lr,
        });

        let done = iter + 1;
        if cfg.train.checkpoint_interval > 0 && done % cfg.train.checkpoint_interval == 0 {
            on_checkpoint(done, &params);
        }
        if cfg.train.eval_interval > 0 && done % cfg.train.eval_interval == 0 {
            let model = DpaModel {
                params: &params,
                encoder: &cfg.encoder,
                decoder: &cfg.decoder,
                predictor: &cfg.predictor,
            };
            let report = meta_test(
                corpus,
                split,
                &model,
                cfg.train.eval_episodes,
                cfg.train.eval_seed,
                cfg.train.n_way,
                cfg.train.k_shot,
                &opts,
            )?;
            log.evals.push(EvalRecord {
                iteration: done,
                mean_iou: report.mean_iou,
            });
        }
    }
    Ok((params, log))
}

/// Meta-train on one fixed episode (memorization probe).
pub fn overfit_single_episode(
    episode: &Episode,
    cfg: &Config,
    iterations: usize,
) -> Result<(ParamStore, TrainLog), ModelError> {
    cfg.train.validate()?;
    let mut params = init_model_params(cfg, cfg.train.seed);
    let mut opt = Adam::new(cfg.train.beta1, cfg.train.beta2);
    let mut log = TrainLog::default();
    for iter in 0..iterations {
        let (mut grads, ce, distill, total) = train_step(&params, episode, cfg)?;
        if let Some(max_norm) = cfg.train.grad_clip {
            clip_grad_norm(&mut grads, max_norm);
        }
        let lr = lr_at(iter, cfg.train.learning_rate, cfg.train.lr_halving_interval);
        opt.step(&mut params, &grads, lr);
        log.iterations.push(IterRecord {
            iteration: iter,
            ce,
            distill,
            total,
            lr,
        });
    }
    Ok((params, log))
}

/// Anything that can produce per-query masks for an episode. The trained
/// model implements this; test oracles (ground-truth echo, uniform random)
/// plug into the same evaluation loop.
pub trait EpisodePredictor {
    fn predict_episode(&self, episode: &Episode) -> Result<Vec<Array1<i32>>, ModelError>;
}

/// The trained model: encode, adapt prototypes per query, match.
pub struct DpaModel<'a> {
    pub params: &'a ParamStore,
    pub encoder: &'a EncoderConfig,
    pub decoder: &'a DecoderConfig,
    pub predictor: &'a PredictorConfig,
}

impl DpaModel<'_> {
    /// Per-query row-stochastic mask logits for one episode.
    pub fn episode_logits(&self, episode: &Episode) -> Result<Vec<MaskLogits>, ModelError> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, self.params);
        let features = encode_episode_on(&mut tape, episode, self.encoder, &bound)?;
        let masks: Vec<Vec<&crate::data::BinaryMask>> = (1..=episode.n_way)
            .map(|local| {
                episode
                    .support_for(local)
                    .into_iter()
                    .map(|e| &e.mask)
                    .collect()
            })
            .collect();
        let vanilla = build_prototype_set_on(&mut tape, &features.support, &masks)?;
        let mut out = Vec::with_capacity(episode.query.len());
        for qi in 0..episode.query.len() {
            let (task, _distill, _trace) =
                decode_on(&mut tape, &vanilla, &features, qi, self.decoder, &bound)?;
            let stacked = task.stacked(&mut tape);
            let probs = mask_logits_on(&mut tape, features.queries[qi], stacked, self.predictor)?;
            out.push(MaskLogits::new(
                tape.value(probs)
                    .clone()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("logits are 2-d"),
            )?);
        }
        Ok(out)
    }
}

impl EpisodePredictor for DpaModel<'_> {
    fn predict_episode(&self, episode: &Episode) -> Result<Vec<Array1<i32>>, ModelError> {
        Ok(self
            .episode_logits(episode)?
            .iter()
            .map(predict_mask)
            .collect())
    }
}

/// Oracle injection hook: echoes the ground truth.
pub struct GroundTruthPredictor;

impl EpisodePredictor for GroundTruthPredictor {
    fn predict_episode(&self, episode: &Episode) -> Result<Vec<Array1<i32>>, ModelError> {
        Ok(episode.query.iter().map(|q| q.truth.clone()).collect())
    }
}

/// Uniform random labels in `{0..N}`, deterministic per episode content.
pub struct UniformRandomPredictor {
    pub seed: u64,
}

impl EpisodePredictor for UniformRandomPredictor {
    fn predict_episode(&self, episode: &Episode) -> Result<Vec<Array1<i32>>, ModelError> {
        let mut out = Vec::with_capacity(episode.query.len());
        for (qi, q) in episode.query.iter().enumerate() {
            let mut rng = seeds::rng(&[self.seed, q.block_id as u64, qi as u64]);
            out.push(Array1::from_shape_fn(q.cloud.len(), |_| {
                rng.random_range(0..=episode.n_way as i32)
            }));
        }
        Ok(out)
    }
}

/// Aggregate over evaluation episodes: mean of episode means plus per-class
/// averages keyed by original corpus class id.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub mean_iou: f64,
    pub episodes: usize,
    pub episode_mious: Vec<f64>,
    pub per_class_iou: BTreeMap<u32, f64>,
    pub reports: Vec<IoUReport>,
}

/// Episode seed for evaluation index `e`; shared by every consumer that
/// needs to reconstruct the evaluation episodes.
pub fn eval_episode_seed(eval_seed: u64, index: usize) -> u64 {
    seeds::mix(&[eval_seed, stream::EVAL, index as u64])
}

/// Evaluate a predictor over `n_episodes` sampled with the fixed eval seed.
#[allow(clippy::too_many_arguments)]
pub fn meta_test(
    corpus: &[LabeledPointCloud],
    split: &ClassSplit,
    predictor: &dyn EpisodePredictor,
    n_episodes: usize,
    eval_seed: u64,
    n_way: usize,
    k_shot: usize,
    opts: &EpisodeOptions,
) -> Result<EvalReport, ModelError> {
    let mut episode_mious = Vec::with_capacity(n_episodes);
    let mut reports = Vec::with_capacity(n_episodes);
    let mut class_sum: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for e in 0..n_episodes {
        let seed = eval_episode_seed(eval_seed, e);
        let episode = sample_episode(corpus, split, Phase::Test, n_way, k_shot, seed, opts)?;
        let preds = predictor.predict_episode(&episode)?;
        let truths: Vec<Array1<i32>> = episode.query.iter().map(|q| q.truth.clone()).collect();
        let report = episode_miou(&preds, &truths, n_way, false);
        episode_mious.push(report.mean_iou);
        for (&local, &value) in &report.per_class_iou {
            let original = episode.class_remap[(local - 1) as usize];
            let entry = class_sum.entry(original).or_insert((0.0, 0));
            entry.0 += value;
            entry.1 += 1;
        }
        reports.push(report);
    }
    let mean_iou = episode_mious.iter().sum::<f64>() / episode_mious.len().max(1) as f64;
    let per_class_iou = class_sum
        .into_iter()
        .map(|(k, (sum, count))| (k, sum / count as f64))
        .collect();
    Ok(EvalReport {
        mean_iou,
        episodes: n_episodes,
        episode_mious,
        per_class_iou,
        reports,
    })
}

/// Component toggles for the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub rectification: bool,
    pub p2q_attention: bool,
    pub distillation: bool,
}

impl Toggles {
    pub fn label(&self) -> String {
        if !self.rectification && !self.p2q_attention && !self.distillation {
            return "baseline".to_string();
        }
        let mut parts = Vec::new();
        if self.rectification {
            parts.push("PR");
        }
        if self.p2q_attention {
            parts.push("P2QA");
        }
        if self.distillation {
            parts.push("PD");
        }
        format!("+{}", parts.join("+"))
    }
}

/// The nested grid: baseline, +PR, +PR+P2QA, +PR+P2QA+PD.
pub fn nested_grid() -> Vec<Toggles> {
    vec![
        Toggles { rectification: false, p2q_attention: false, distillation: false },
        Toggles { rectification: true, p2q_attention: false, distillation: false },
        Toggles { rectification: true, p2q_attention: true, distillation: false },
        Toggles { rectification: true, p2q_attention: true, distillation: true },
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub label: String,
    pub per_seed: Vec<f64>,
    pub seed_mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Apply toggles to a config: components off are replaced by identity and
/// distillation off zeroes gamma.
pub fn config_with_toggles(cfg: &Config, toggles: Toggles, seed: u64) -> Config {
    let mut out = cfg.clone();
    out.decoder.rectification = toggles.rectification;
    out.decoder.p2q_attention = toggles.p2q_attention;
    out.decoder.distillation = toggles.distillation;
    if !toggles.distillation {
        out.train.gamma = 0.0;
    }
    out.train.seed = seed;
    out
}

/// Train and evaluate one model per toggle combination, sharing seeds (and
/// optional per-seed pretrained encoders) across combinations.
pub fn ablate(
    corpus: &[LabeledPointCloud],
    split: &ClassSplit,
    cfg: &Config,
    combos: &[Toggles],
    seeds: &[u64],
    pretrained: Option<&BTreeMap<u64, ParamStore>>,
    allow_free_combinations: bool,
) -> Result<AblationTable, ModelError> {
    if !allow_free_combinations {
        for t in combos {
            if t.p2q_attention && !t.rectification {
                return Err(ModelError::BadConfig(format!(
                    "combination {} breaks the nested grid (P2QA requires PR); \
                     pass the free-combination flag to allow it",
                    t.label()
                )));
            }
        }
    }
    let mut rows = Vec::with_capacity(combos.len());
    for &toggles in combos {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let run_cfg = config_with_toggles(cfg, toggles, seed);
            let encoder_init = pretrained.and_then(|m| m.get(&seed));
            let (weights, _log) =
                meta_train(corpus, split, &run_cfg, encoder_init, |_, _| {})?;
            let model = DpaModel {
                params: &weights,
                encoder: &run_cfg.encoder,
                decoder: &run_cfg.decoder,
                predictor: &run_cfg.predictor,
            };
            let report = meta_test(
                corpus,
                split,
                &model,
                run_cfg.train.eval_episodes,
                run_cfg.train.eval_seed,
                run_cfg.train.n_way,
                run_cfg.train.k_shot,
                &run_cfg.data.episode_options(),
            )?;
            per_seed.push(report.mean_iou);
        }
        let seed_mean = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
        rows.push(AblationRow {
            toggles,
            label: toggles.label(),
            per_seed,
            seed_mean,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

/// Which hyper-parameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Gamma,
    NumBlocks,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean_iou: f64,
    pub final_total_loss: f64,
    pub loss_finite: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

/// Train/evaluate once per value of the swept parameter.
pub fn sweep(
    corpus: &[LabeledPointCloud],
    split: &ClassSplit,
    cfg: &Config,
    param: SweepParam,
    values: &[f64],
) -> Result<SweepTable, ModelError> {
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut run_cfg = cfg.clone();
        match param {
            SweepParam::Gamma => run_cfg.train.gamma = value,
            SweepParam::NumBlocks => {
                let l = value.round();
                if l < 1.0 {
                    return Err(ModelError::BadConfig(format!(
                        "num_blocks sweep value {value} is below 1"
                    )));
                }
                run_cfg.decoder.num_blocks = l as usize;
            }
        }
        let (weights, log) = meta_train(corpus, split, &run_cfg, None, |_, _| {})?;
        let loss_finite = log
            .iterations
            .iter()
            .all(|r| r.total.is_finite() && r.ce.is_finite() && r.distill.is_finite());
        let final_total_loss = log.iterations.last().map_or(f64::NAN, |r| r.total);
        let model = DpaModel {
            params: &weights,
            encoder: &run_cfg.encoder,
            decoder: &run_cfg.decoder,
            predictor: &run_cfg.predictor,
        };
        let report = meta_test(
            corpus,
            split,
            &model,
            run_cfg.train.eval_episodes,
            run_cfg.train.eval_seed,
            run_cfg.train.n_way,
            run_cfg.train.k_shot,
            &run_cfg.data.episode_options(),
        )?;
        rows.push(SweepRow {
            value,
            mean_iou: report.mean_iou,
            final_total_loss,
            loss_finite,
        });
    }
    Ok(SweepTable { param, rows })
}
