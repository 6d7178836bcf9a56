//! `dpa` — synthetic-corpus few-shot point-cloud segmentation pipeline:
//! data generation, pretraining, meta-training, evaluation, ablation grids,
//! hyper-parameter sweeps, and static plots.

mod manifest;
mod plot;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dpa_core::config::Config;
use dpa_core::container::{ArrayData, NamedArray};
use dpa_core::data::{build_corpus, read_corpus, sample_episode, write_corpus, ClassSplit, Phase};
use dpa_core::params::{load_checkpoint, save_checkpoint};
use dpa_core::training::{
    self, eval_episode_seed, meta_test, meta_train, nested_grid, DpaModel, SweepParam, Toggles,
};
use manifest::{prepare_out_dir, RunTracker, SeedInfo};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "dpa",
    version,
    about = "Few-shot point-cloud segmentation with dynamic prototype adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus file from the config's data section.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Pretrain the encoder on seen classes; writes an encoder checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Episodic meta-training; writes the model checkpoint and train log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Encoder checkpoint to initialize from (output of `pretrain`).
        #[arg(long)]
        encoder_ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint over held-out episodes.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of evaluation episodes (defaults to the config value).
        #[arg(long)]
        episodes: Option<usize>,
        /// Also export predicted masks plus a class-name sidecar.
        #[arg(long)]
        dump_predictions: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train one model per component combination and tabulate mean-IoU.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Toggle grid: `nested` or a comma list of PR/P2QA/PD bit triples
        /// such as `000,100,110,111`.
        #[arg(long, default_value = "nested")]
        toggles: String,
        /// Allow combinations outside the nested grid.
        #[arg(long)]
        allow_free: bool,
        /// Comma-separated training seeds shared across combinations.
        #[arg(long, default_value = "1,2,3,4,5")]
        seeds: String,
        /// Run encoder pretraining once per seed and share it.
        #[arg(long)]
        pretrain: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Sweep gamma or the decoder depth; emits a table and a plot.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParamArg,
        /// Comma-separated values, e.g. `0.1,0.3,0.5,0.7`.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Render loss/IoU curves from a train log.
    Plot {
        #[arg(long)]
        trainlog: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParamArg {
    Gamma,
    #[value(name = "l", alias = "num-blocks")]
    NumBlocks,
}

impl From<SweepParamArg> for SweepParam {
    fn from(v: SweepParamArg) -> Self {
        match v {
            SweepParamArg::Gamma => SweepParam::Gamma,
            SweepParamArg::NumBlocks => SweepParam::NumBlocks,
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        let kind = if err.downcast_ref::<dpa_core::ConfigError>().is_some() {
            "config"
        } else {
            "runtime"
        };
        let line = serde_json::json!({ "error": format!("{err:#}"), "kind": kind });
        eprintln!("{line}");
        std::process::exit(1);
    }
}

/// Load a config file and apply the DPA_SEED override to the training seed.
fn load_config(path: &Path) -> Result<(Config, Option<u64>)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = Config::from_json_str(&text)?;
    let mut override_seed = None;
    if let Ok(value) = std::env::var("DPA_SEED") {
        let seed: u64 = value
            .parse()
            .map_err(|_| anyhow!("DPA_SEED must be an unsigned integer, got '{value}'"))?;
        cfg.train.seed = seed;
        override_seed = Some(seed);
    }
    Ok((cfg, override_seed))
}

fn seed_info(cfg: &Config, dpa_override: Option<u64>) -> SeedInfo {
    SeedInfo {
        data_seed: cfg.data.seed,
        config_train_seed: cfg.train.seed,
        dpa_seed_override: dpa_override,
        effective_train_seed: cfg.train.seed,
        eval_seed: cfg.train.eval_seed,
    }
}

type CorpusBundle = (
    dpa_core::CorpusManifest,
    Vec<dpa_core::LabeledPointCloud>,
    ClassSplit,
);

fn load_corpus_and_split(path: &Path, cfg: &Config) -> Result<CorpusBundle> {
    let (manifest, corpus) =
        read_corpus(path).with_context(|| format!("reading corpus {}", path.display()))?;
    let split = ClassSplit::two_fold(manifest.class_names.len(), cfg.data.fold);
    Ok((manifest, corpus, split))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, force } => cmd_gen_data(&config, &out, force),
        Command::Pretrain {
            config,
            corpus,
            out,
            force,
        } => cmd_pretrain(&config, &corpus, &out, force),
        Command::Train {
            config,
            corpus,
            encoder_ckpt,
            out,
            force,
        } => cmd_train(&config, &corpus, encoder_ckpt.as_deref(), &out, force),
        Command::Eval {
            config,
            corpus,
            ckpt,
            episodes,
            dump_predictions,
            out,
            force,
        } => cmd_eval(&config, &corpus, &ckpt, episodes, dump_predictions, &out, force),
        Command::Ablate {
            config,
            corpus,
            toggles,
            allow_free,
            seeds,
            pretrain,
            out,
            force,
        } => cmd_ablate(&config, &corpus, &toggles, allow_free, &seeds, pretrain, &out, force),
        Command::Sweep {
            config,
            corpus,
            param,
            values,
            out,
            force,
        } => cmd_sweep(&config, &corpus, param.into(), &values, &out, force),
        Command::Plot { trainlog, out, force } => cmd_plot(&trainlog, &out, force),
    }
}

fn cmd_gen_data(config: &Path, out: &Path, force: bool) -> Result<()> {
    let (cfg, dpa_override) = load_config(config)?;
    prepare_out_dir(out, force)?;
    let mut tracker = RunTracker::start("gen-data", out);
    let (manifest, clouds) = build_corpus(
        cfg.data.blocks,
        cfg.data.points_per_block,
        cfg.data.seed,
        &cfg.data.generator,
    )?;
    let corpus_path = tracker.artifact("corpus.dpapc");
    write_corpus(&corpus_path, &manifest, &clouds)?;
    println!(
        "wrote corpus: {} blocks x {} points, {} classes -> {}",
        manifest.blocks,
        manifest.points_per_block,
        manifest.class_names.len(),
        corpus_path.display()
    );
    tracker.finish(&cfg.to_json_value(), seed_info(&cfg, dpa_override))
}

fn cmd_pretrain(config: &Path, corpus: &Path, out: &Path, force: bool) -> Result<()> {
    let (cfg, dpa_override) = load_config(config)?;
    let (_, clouds, split) = load_corpus_and_split(corpus, &cfg)?;
    prepare_out_dir(out, force)?;
    let mut tracker = RunTracker::start("pretrain", out);
    let (encoder_params, losses) = training::pretrain(&clouds, &split, &cfg)?;
    let ckpt = tracker.artifact("encoder.dpawt");
    save_checkpoint(&ckpt, &encoder_params, &cfg.to_json_value())?;
    let losses_path = tracker.artifact("pretrain_losses.json");
    std::fs::write(&losses_path, serde_json::to_string_pretty(&losses)?)?;
    println!(
        "pretrained encoder over {} batches: loss {:.4} -> {:.4}; checkpoint {}",
        losses.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        ckpt.display()
    );
    tracker.finish(&cfg.to_json_value(), seed_info(&cfg, dpa_override))
}

fn cmd_train(
    config: &Path,
    corpus: &Path,
    encoder_ckpt: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<()> {
    let (cfg, dpa_override) = load_config(config)?;
    let (_, clouds, split) = load_corpus_and_split(corpus, &cfg)?;
    let initial_encoder = match encoder_ckpt {
        Some(path) => {
            let (store, _) = load_checkpoint(path)
                .with_context(|| format!("reading encoder checkpoint {}", path.display()))?;
            Some(store)
        }
        None => None,
    };
    prepare_out_dir(out, force)?;
    let mut tracker = RunTracker::start("train", out);
    let ckpt_dir = out.to_path_buf();
    let cfg_json = cfg.to_json_value();
    let (weights, log) = meta_train(
        &clouds,
        &split,
        &cfg,
        initial_encoder.as_ref(),
        |iter, params| {
            let path = ckpt_dir.join(format!("checkpoint_{iter:06}.dpawt"));
            if let Err(err) = save_checkpoint(&path, params, &cfg_json) {
                eprintln!("checkpoint at iteration {iter} failed: {err}");
            }
        },
    )?;
    let model_path = tracker.artifact("model.dpawt");
    save_checkpoint(&model_path, &weights, &cfg.to_json_value())?;
    let log_path = tracker.artifact("trainlog.jsonl");
    let mut buf = Vec::new();
    log.write_jsonl(&mut buf)?;
    std::fs::write(&log_path, buf)?;
    println!(
        "meta-trained {} iterations: final total {:.4}; model {}",
        log.iterations.len(),
        log.iterations.last().map_or(f64::NAN, |r| r.total),
        model_path.display()
    );
    tracker.finish(&cfg.to_json_value(), seed_info(&cfg, dpa_override))
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    config: &Path,
    corpus: &Path,
    ckpt: &Path,
    episodes: Option<usize>,
    dump_predictions: bool,
    out: &Path,
    force: bool,
) -> Result<()> {
    let (cfg, dpa_override) = load_config(config)?;
    let (manifest, clouds, split) = load_corpus_and_split(corpus, &cfg)?;
    let (weights, _) = load_checkpoint(ckpt)
        .with_context(|| format!("reading checkpoint {}", ckpt.display()))?;
    prepare_out_dir(out, force)?;
    let mut tracker = RunTracker::start("eval", out);
    let n_episodes = episodes.unwrap_or(cfg.train.eval_episodes);
    let model = DpaModel {
        params: &weights,
        encoder: &cfg.encoder,
        decoder: &cfg.decoder,
        predictor: &cfg.predictor,
    };
    let opts = cfg.data.episode_options();
    let report = meta_test(
        &clouds,
        &split,
        &model,
        n_episodes,
        cfg.train.eval_seed,
        cfg.train.n_way,
        cfg.train.k_shot,
        &opts,
    )?;
    let report_path = tracker.artifact("eval_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    println!(
        "mean-IoU over {} episodes: {:.4} ({})",
        n_episodes,
        report.mean_iou,
        report_path.display()
    );

    if dump_predictions {
        let mut arrays = Vec::new();
        let mut sidecar = Vec::new();
        for e in 0..n_episodes {
            let seed = eval_episode_seed(cfg.train.eval_seed, e);
            let episode = sample_episode(
                &clouds,
                &split,
                Phase::Test,
                cfg.train.n_way,
                cfg.train.k_shot,
                seed,
                &opts,
            )?;
            let preds = training::EpisodePredictor::predict_episode(&model, &episode)?;
            for (qi, pred) in preds.iter().enumerate() {
                arrays.push(NamedArray::new(
                    format!("episode_{e}/query_{qi}/pred"),
                    vec![pred.len()],
                    ArrayData::I32(pred.to_vec()),
                ));
            }
            let remap: BTreeMap<String, String> = episode
                .class_remap
                .iter()
                .enumerate()
                .map(|(i, &orig)| ((i + 1).to_string(), manifest.class_name(orig).to_string()))
                .collect();
            sidecar.push(serde_json::json!({
                "episode": e,
                "query_blocks": episode.query.iter().map(|q| q.block_id).collect::<Vec<_>>(),
                "local_class_names": remap,
            }));
        }
        let pred_path = tracker.artifact("predictions.dpapc");
        dpa_core::container::write_container(
            &pred_path,
            &dpa_core::container::CORPUS_MAGIC,
            &serde_json::json!({"kind": "predictions", "episodes": n_episodes}),
            &arrays,
        )?;
        let sidecar_path = tracker.artifact("predictions_classes.json");
        std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    }
    tracker.finish(&cfg.to_json_value(), seed_info(&cfg, dpa_override))
}

fn parse_toggles(spec: &str) -> Result<Vec<Toggles>> {
    if spec == "nested" {
        return Ok(nested_grid());
    }
    let mut out = Vec::new();
    for item in spec.split(',') {
        let bits: Vec<char> = item.trim().chars().collect();
        if bits.len() != 3 || bits.iter().any(|c| *c != '0' && *c != '1') {
            bail!("toggle spec '{item}' must be three 0/1 bits (PR, P2QA, PD)");
        }
        out.push(Toggles {
            rectification: bits[0] == '1',
            p2q_attention: bits[1] == '1',
            distillation: bits[2] == '1',
        });
    }
    Ok(out)
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| anyhow!("bad seed '{s}'"))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    config: &Path,
    corpus: &Path,
    toggles: &str,
    allow_free: bool,
    seeds: &str,
    pretrain: bool,
    out: &Path,
    force: bool,
) -> Result<()> {
    let (cfg, dpa_override) = load_config(config)?;
    let (_, clouds, split) = load_corpus_and_split(corpus, &cfg)?;
    let combos = parse_toggles(toggles)?;
    let seeds = parse_seeds(seeds)?;
    prepare_out_dir(out, force)?;
    let mut tracker = RunTracker::start("ablate", out);

    let pretrained = if pretrain {
        let mut map = BTreeMap::new();
        for &seed in &seeds {
            let mut pcfg = cfg.clone();
            pcfg.train.seed = seed;
            let (enc, _) = training::pretrain(&clouds, &split, &pcfg)?;
            map.insert(seed, enc);
        }
        Some(map)
    } else {
        None
    };

    let table = training::ablate(
        &clouds,
        &split,
        &cfg,
        &combos,
        &seeds,
        pretrained.as_ref(),
        allow_free,
    )?;

    let json_path = tracker.artifact("ablation.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&table)?)?;
    let csv_path = tracker.artifact("ablation.csv");
    std::fs::write(&csv_path, ablation_csv(&table))?;
    let txt_path = tracker.artifact("ablation.txt");
    let text = ablation_text(&table);
    std::fs::write(&txt_path, &text)?;
    print!("{text}");
    tracker.finish(&cfg.to_json_value(), seed_info(&cfg, dpa_override))
}

fn ablation_csv(table: &training::AblationTable) -> String {
    let mut out = String::from("label,pr,p2qa,pd");
    for seed in &table.seeds {
        let _ = write!(out, ",seed_{seed}");
    }
    out.push_str(",seed_mean\n");
    for row in &table.rows {
        let _ = write!(
            out,
            "{},{},{},{}",
            row.label,
            row.toggles.rectification as u8,
            row.toggles.p2q_attention as u8,
            row.toggles.distillation as u8
        );
        for v in &row.per_seed {
            let _ = write!(out, ",{v:.6}");
        }
        let _ = writeln!(out, ",{:.6}", row.seed_mean);
    }
    out
}

fn ablation_text(table: &training::AblationTable) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:>10}  per-seed mean-IoU",
        "combination", "seed-mean"
    );
    for row in &table.rows {
        let per_seed: Vec<String> = row.per_seed.iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(
            out,
            "{:<14} {:>10.4}  [{}]",
            row.label,
            row.seed_mean,
            per_seed.join(", ")
        );
    }
    out
}

fn cmd_sweep(
    config: &Path,
    corpus: &Path,
    param: SweepParam,
    values: &str,
    out: &Path,
    force: bool,
) -> Result<()> {
    let (cfg, dpa_override) = load_config(config)?;
    let (_, clouds, split) = load_corpus_and_split(corpus, &cfg)?;
    let values: Vec<f64> = values
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| anyhow!("bad sweep value '{s}'"))
        })
        .collect::<Result<_>>()?;
    prepare_out_dir(out, force)?;
    let mut tracker = RunTracker::start("sweep", out);
    let table = training::sweep(&clouds, &split, &cfg, param, &values)?;

    let json_path = tracker.artifact("sweep.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&table)?)?;
    let csv_path = tracker.artifact("sweep.csv");
    let mut csv = String::from("value,mean_iou,final_total_loss,loss_finite\n");
    for row in &table.rows {
        let _ = writeln!(
            csv,
            "{},{:.6},{:.6},{}",
            row.value, row.mean_iou, row.final_total_loss, row.loss_finite
        );
    }
    std::fs::write(&csv_path, csv)?;
    let txt_path = tracker.artifact("sweep.txt");
    let mut text = format!(
        "{:<10} {:>10} {:>18} {:>12}\n",
        "value", "mean-IoU", "final-total-loss", "loss-finite"
    );
    for row in &table.rows {
        let _ = writeln!(
            text,
            "{:<10} {:>10.4} {:>18.4} {:>12}",
            row.value, row.mean_iou, row.final_total_loss, row.loss_finite
        );
    }
    std::fs::write(&txt_path, &text)?;
    print!("{text}");

    let plot_path = tracker.artifact("sweep.svg");
    let bars: Vec<(String, f64)> = table
        .rows
        .iter()
        .map(|r| (format!("{}", r.value), r.mean_iou))
        .collect();
    let param_name = match param {
        SweepParam::Gamma => "gamma",
        SweepParam::NumBlocks => "decoder blocks L",
    };
    plot::bar_chart(
        &plot_path,
        &format!("mean-IoU vs {param_name}"),
        &bars,
        "mean-IoU",
    )?;
    tracker.finish(&cfg.to_json_value(), seed_info(&cfg, dpa_override))
}

fn cmd_plot(trainlog: &Path, out: &Path, force: bool) -> Result<()> {
    let text = std::fs::read_to_string(trainlog)
        .with_context(|| format!("reading train log {}", trainlog.display()))?;
    let log = dpa_core::TrainLog::read_jsonl(&text)
        .map_err(|e| anyhow!("parsing train log: {e}"))?;
    if log.iterations.is_empty() {
        bail!("train log has no iteration records");
    }
    prepare_out_dir(out, force)?;
    let mut tracker = RunTracker::start("plot", out);

    let loss_path = tracker.artifact("loss.svg");
    let series = vec![
        (
            "total".to_string(),
            log.iterations
                .iter()
                .map(|r| (r.iteration as f64, r.total))
                .collect::<Vec<_>>(),
        ),
        (
            "cross-entropy".to_string(),
            log.iterations
                .iter()
                .map(|r| (r.iteration as f64, r.ce))
                .collect(),
        ),
        (
            "distillation".to_string(),
            log.iterations
                .iter()
                .map(|r| (r.iteration as f64, r.distill))
                .collect(),
        ),
    ];
    plot::line_chart(&loss_path, "training loss", &series, "iteration", "loss")?;

    if !log.evals.is_empty() {
        let iou_path = tracker.artifact("iou.svg");
        let series = vec![(
            "mean-IoU".to_string(),
            log.evals
                .iter()
                .map(|r| (r.iteration as f64, r.mean_iou))
                .collect::<Vec<_>>(),
        )];
        plot::line_chart(&iou_path, "held-out mean-IoU", &series, "iteration", "mean-IoU")?;
    }
    println!("plots written under {}", out.display());
    // plot consumes an artifact, not a config; record an empty one
    tracker.finish(
        &serde_json::json!({}),
        SeedInfo {
            data_seed: 0,
            config_train_seed: 0,
            dpa_seed_override: None,
            effective_train_seed: 0,
            eval_seed: 0,
        },
    )
}
