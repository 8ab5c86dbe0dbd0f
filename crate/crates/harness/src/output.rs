//! Result emission: tidy CSV (or JSON) tables plus a run manifest.
//!
//! Data files are a pure function of the configuration and seed. Wall-clock
//! information lives only in `run-manifest.json`.

use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;

use crate::config::{ExperimentConfig, ExperimentKind, FORMAT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// One pass/fail threshold of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

/// Writes `rows` to `dir/stem.{csv,json}` and returns the path.
pub fn write_table<R: Serialize>(dir: &Path, stem: &str, rows: &[R], format: Format) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    match format {
        Format::Csv => {
            let path = dir.join(format!("{stem}.csv"));
            let mut w = csv::Writer::from_path(&path).with_context(|| format!("opening {}", path.display()))?;
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
            Ok(path)
        }
        Format::Json => {
            let path = dir.join(format!("{stem}.json"));
            write_json(&path, &rows)?;
            Ok(path)
        }
    }
}

pub fn write_json<V: Serialize + ?Sized>(path: &Path, value: &V) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub format_version: String,
    pub crate_version: String,
    pub started_unix_s: u64,
    pub wall_time_s: f64,
    pub files: Vec<String>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

pub fn write_manifest(
    dir: &Path,
    kind: ExperimentKind,
    cfg: &ExperimentConfig,
    started: SystemTime,
    elapsed: Duration,
    files: &[PathBuf],
    checks: &[Check],
) -> anyhow::Result<PathBuf> {
    let manifest = RunManifest {
        experiment: kind.as_str().into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        format_version: FORMAT_VERSION.into(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
        started_unix_s: started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        wall_time_s: elapsed.as_secs_f64(),
        files: files
            .iter()
            .map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default())
            .collect(),
        checks: checks.to_vec(),
        passed: all_passed(checks),
    };
    let path = dir.join("run-manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}
