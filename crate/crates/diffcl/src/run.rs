//! Run directories and the CSV files written into them.
//!
//! ```text
//! run.toml            RunManifest
//! config.toml         the config the run used, byte for byte
//! history.csv         one row per step
//! logs/run.log        one line per epoch
//! checkpoints/epoch-NNNN/
//! eval/metrics.csv    per-volume metrics plus a `mean` row
//! ```

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use diffcl_core::evalkit::{MetricReport, MetricSummary};
use diffcl_core::losses::LossReport;
use diffcl_core::trainer::{HistoryRow, TrainConfig, TrainObserver, TrainState};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, FORMAT_VERSION};
use crate::config::{sha256_hex, to_toml};
use crate::error::{CliError, Result};

pub const RUN_MANIFEST: &str = "run.toml";
pub const CONFIG: &str = "config.toml";
pub const HISTORY: &str = "history.csv";
pub const METRICS: &str = "metrics.csv";
pub const ABLATION: &str = "ablation.csv";

pub fn artifact_version() -> String {
    format!("diffcl {}+ckpt{FORMAT_VERSION}", env!("CARGO_PKG_VERSION"))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    /// Config file named on the command line, if any.
    pub config_source: Option<String>,
    /// SHA-256 of `config.toml` in the run directory.
    pub config_hash: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub artifact_version: String,
    pub output_dir: String,
}

/// A directory owned by one command invocation.
pub struct RunDir {
    pub root: PathBuf,
    pub manifest: RunManifest,
}

impl RunDir {
    /// Creates `root`, writes the config copy and an unfinished manifest.
    pub fn create(root: &Path, command: &str, config: &TrainConfig, config_source: Option<&Path>) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(CliError::io(root))?;
        let text = to_toml(config)?;
        write_file(&root.join(CONFIG), text.as_bytes())?;
        let manifest = RunManifest {
            command: command.into(),
            config_source: config_source.map(|p| p.display().to_string()),
            config_hash: sha256_hex(text.as_bytes()),
            seed: config.seed,
            started_unix: unix_now(),
            finished_unix: None,
            artifact_version: artifact_version(),
            output_dir: root.display().to_string(),
        };
        let dir = RunDir { root: root.to_path_buf(), manifest };
        dir.write_manifest()?;
        Ok(dir)
    }

    pub fn write_manifest(&self) -> Result<()> {
        let path = self.root.join(RUN_MANIFEST);
        let text = toml::to_string(&self.manifest).map_err(|e| CliError::format(&path, e))?;
        write_file(&path, text.as_bytes())
    }

    pub fn finish(&mut self) -> Result<()> {
        self.manifest.finished_unix = Some(unix_now());
        self.write_manifest()
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn subdir(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.root.join(rel);
        std::fs::create_dir_all(&p).map_err(CliError::io(&p))?;
        Ok(p)
    }

    pub fn checkpoint_dir(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch-{epoch:04}"))
    }

    /// Appends one line to `logs/run.log`.
    pub fn log(&self, line: &str) -> Result<()> {
        let dir = self.subdir("logs")?;
        let path = dir.join("run.log");
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(CliError::io(&path))?;
        writeln!(f, "{line}").map_err(CliError::io(&path))
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(CliError::io(path))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Io { path: path.to_path_buf(), source },
        other => CliError::format(path, format!("{other:?}")),
    }
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e| csv_error(path, e);
    w.write_record(HistoryRow::HEADER).map_err(err)?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), r.epoch.to_string()];
        rec.extend(r.report.values().iter().map(f64::to_string));
        rec.extend([r.lambda.to_string(), r.bank_fill.to_string(), r.labeled_in_batch.to_string()]);
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(CliError::io(path))
}

pub const METRIC_HEADER: [&str; 8] = ["id", "Dice", "Jaccard", "95HD", "ASD", "95HD_scaled", "ASD_scaled", "empty_mask"];

pub fn write_metrics(path: &Path, report: &MetricReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e| csv_error(path, e);
    w.write_record(METRIC_HEADER).map_err(err)?;
    for v in &report.volumes {
        w.write_record([
            v.id.clone(),
            v.dice.to_string(),
            v.jaccard.to_string(),
            v.hd95.to_string(),
            v.asd.to_string(),
            v.hd95_scaled.to_string(),
            v.asd_scaled.to_string(),
            v.empty_mask.to_string(),
        ])
        .map_err(err)?;
    }
    let m = report.mean;
    let mut mean = vec!["mean".to_string()];
    mean.extend(m.values().iter().map(f64::to_string));
    mean.extend([String::new(), String::new(), String::new()]);
    w.write_record(&mean).map_err(err)?;
    w.flush().map_err(CliError::io(path))
}

pub fn write_ablation(path: &Path, rows: &[(String, MetricSummary)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e| csv_error(path, e);
    let mut header = vec!["config"];
    header.extend(MetricSummary::COLUMNS);
    w.write_record(&header).map_err(err)?;
    for (name, m) in rows {
        let mut rec = vec![name.clone()];
        rec.extend(m.values().iter().map(f64::to_string));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(CliError::io(path))
}

/// Header and rows of a CSV file, with every cell kept as text.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    if !path.exists() {
        return Err(CliError::NoData(format!("{} not found", path.display())));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_owned).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(|e| csv_error(path, e))?.iter().map(str::to_owned).collect());
    }
    Ok((header, rows))
}

/// Writes a checkpoint and the history after every epoch.
pub struct RunRecorder<'a> {
    pub run: &'a RunDir,
    pub config: &'a TrainConfig,
    /// Keep only this many most recent checkpoints; `0` keeps all.
    pub keep: usize,
    /// Print progress to the log.
    pub verbose: bool,
}

impl TrainObserver for RunRecorder<'_> {
    type Error = CliError;

    fn on_epoch(&mut self, state: &TrainState) -> Result<()> {
        let dir = self.run.checkpoint_dir(state.epoch);
        save_checkpoint(&dir, self.config, state)?;
        write_history(&self.run.path(HISTORY), &state.history)?;
        let last = state.history.last().map(|r| r.report).unwrap_or_default();
        let line = epoch_line(state.epoch, self.config.epochs, &last);
        self.run.log(&line)?;
        if self.verbose {
            log::info!("{line}");
        }
        if self.keep > 0 && state.epoch > self.keep {
            let stale = self.run.checkpoint_dir(state.epoch - self.keep);
            if stale.exists() {
                std::fs::remove_dir_all(&stale).map_err(CliError::io(&stale))?;
            }
        }
        Ok(())
    }
}

fn epoch_line(epoch: usize, total: usize, r: &LossReport) -> String {
    format!(
        "epoch {epoch}/{total}: cs_total {:.4} ds_total {:.4} cs_sup {:.4} ds_sup {:.4} contrastive {:.4}",
        r.cs_total, r.ds_total, r.cs_sup, r.ds_sup, r.contrastive
    )
}
