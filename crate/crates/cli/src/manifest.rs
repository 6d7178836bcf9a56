//! Per-run manifest: the resolved config, seeds, artifact paths, code
//! version, and wall-clock timings. Exactly one per output directory.

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct SeedInfo {
    pub data_seed: u64,
    pub config_train_seed: u64,
    pub dpa_seed_override: Option<u64>,
    pub effective_train_seed: u64,
    pub eval_seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: SeedInfo,
    pub artifacts: Vec<String>,
    pub code_version: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub wall_seconds: f64,
}

/// Builder that tracks artifacts while a command runs.
pub struct RunTracker {
    command: String,
    out_dir: PathBuf,
    started_at: DateTime<Utc>,
    started: Instant,
    artifacts: Vec<String>,
}

impl RunTracker {
    pub fn start(command: &str, out_dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            out_dir: out_dir.to_path_buf(),
            started_at: Utc::now(),
            started: Instant::now(),
            artifacts: Vec::new(),
        }
    }

    /// Record an artifact path and return it for writing.
    pub fn artifact(&mut self, name: &str) -> PathBuf {
        let path = self.out_dir.join(name);
        self.artifacts.push(path.display().to_string());
        path
    }

    pub fn finish(self, config: &serde_json::Value, seeds: SeedInfo) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            argv: std::env::args().collect(),
            config: config.clone(),
            seeds,
            artifacts: self.artifacts,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at,
            finished_at: Utc::now(),
            wall_seconds: self.started.elapsed().as_secs_f64(),
        };
        let path = self.out_dir.join(MANIFEST_NAME);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Create the output directory, refusing to reuse a non-empty one without
/// `--force`.
pub fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = std::fs::read_dir(out)
            .with_context(|| format!("reading {}", out.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            bail!(
                "output directory {} is not empty; pass --force to overwrite",
                out.display()
            );
        }
    } else {
        std::fs::create_dir_all(out)
            .with_context(|| format!("creating {}", out.display()))?;
    }
    Ok(())
}
