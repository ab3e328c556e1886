use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use diffcl_core::evalkit::{evaluate, MetricReport, MetricSummary};
use diffcl_core::trainer::{train, TrainConfig, TrainState};
use diffcl_core::voldata::{gen_synthetic_dataset, split_dataset, DatasetSplit, VolumeSample};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, read_config, save_checkpoint};
use crate::config::{load_config, sha256_hex, to_toml, ConfigSource};
use crate::dataset::{read_evaluation_volumes, write_dataset};
use crate::error::{CliError, Result};
use crate::plot::plot_run;
use crate::run::{write_ablation, write_file, write_metrics, RunDir, RunRecorder, ABLATION, METRICS};

#[derive(Debug, Parser)]
#[command(name = "diffcl", version, about = "Semi-supervised volumetric segmentation: data, training, evaluation, ablations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Only print errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML config file. A top-level `preset = "name"` starts from that preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named preset; see `diffcl presets`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Override one key, e.g. `--set optimizer.lr=0.02`. `--optimizer.lr=0.02` also works.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        load_config(&ConfigSource::from_env(self.preset.as_deref(), self.config.as_deref(), &self.overrides))
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset described by a config as NIfTI files.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both networks, checkpointing every epoch, then evaluate.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Keep only the most recent N checkpoints (0 keeps all).
        #[arg(long, default_value_t = 0)]
        keep_checkpoints: usize,
    },
    /// Evaluate the image-only network of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset written by `gen-data` or laid out the same way. Without it
        /// the checkpoint's synthetic split is regenerated.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the four ablation rows.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        keep_checkpoints: usize,
    },
    /// Render PNG charts from the CSV files of a run directory.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
    /// List the built-in presets.
    Presets,
}

const KNOWN_FLAGS: [&str; 12] =
    ["config", "preset", "set", "out", "resume", "keep-checkpoints", "ckpt", "data", "run", "quiet", "help", "version"];

/// Turns `--some.key=value` into `--set some.key=value` for unknown flags.
pub fn rewrite_overrides(args: impl IntoIterator<Item = OsString>) -> Vec<OsString> {
    let mut out = Vec::new();
    for a in args {
        if let Some(s) = a.to_str() {
            if let Some((name, _)) = s.strip_prefix("--").and_then(|rest| rest.split_once('=')) {
                if !KNOWN_FLAGS.contains(&name) {
                    out.push("--set".into());
                    out.push(s[2..].into());
                    continue;
                }
            }
        }
        out.push(a);
    }
    out
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run_command(argv: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(rewrite_overrides(argv)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let verbose = !cli.quiet;
    match &cli.command {
        Command::GenData { config, out } => gen_data(&config.load()?, config.config.as_deref(), out),
        Command::Train { config, out, resume, keep_checkpoints } => {
            let c = config.load()?;
            let mut run = RunDir::create(out, "train", &c, config.config.as_deref())?;
            let report = train_run(&c, &run, resume.as_deref(), *keep_checkpoints, verbose)?;
            if verbose {
                log::info!("{}", summary_line(&report.mean));
            }
            run.finish()
        }
        Command::Eval { ckpt, data, out } => eval_checkpoint(ckpt, data.as_deref(), out, verbose),
        Command::Ablate { config, out, keep_checkpoints } => {
            let rows = ablate(&config.load()?, config.config.as_deref(), out, *keep_checkpoints, verbose)?;
            if verbose {
                for (name, m) in rows {
                    log::info!("{name}: {}", summary_line(&m));
                }
            }
            Ok(())
        }
        Command::Plot { run } => {
            for p in plot_run(run)? {
                if verbose {
                    log::info!("wrote {}", p.display());
                }
            }
            Ok(())
        }
        Command::Presets => {
            for name in crate::config::preset_names() {
                println!("{name}");
            }
            Ok(())
        }
    }
}

fn summary_line(m: &MetricSummary) -> String {
    format!("Dice {:.2} Jaccard {:.2} 95HD {:.2} ASD {:.2}", m.dice, m.jaccard, m.hd95, m.asd)
}

pub fn synthetic_split(config: &TrainConfig) -> Result<DatasetSplit> {
    let data = gen_synthetic_dataset(&config.data.synthetic)?;
    Ok(split_dataset(&data, config.data.labeled_count, config.seed)?)
}

/// Unlabelled training volumes with their held-out labels restored.
pub fn held_out_volumes(split: &DatasetSplit) -> Vec<VolumeSample> {
    split
        .unlabeled
        .iter()
        .zip(&split.held_out)
        .map(|(v, (id, label))| {
            debug_assert_eq!(&v.id, id);
            VolumeSample { label: Some(label.clone()), ..v.clone() }
        })
        .collect()
}

pub fn gen_data(config: &TrainConfig, source: Option<&Path>, out: &Path) -> Result<()> {
    let mut run = RunDir::create(out, "gen-data", config, source)?;
    let split = synthetic_split(config)?;
    let m = write_dataset(out, &split, config.data.synthetic.classes)?;
    log::info!("wrote {} volumes to {}", m.volumes.len(), out.display());
    run.finish()
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    config_hash: &'a str,
    volumes: usize,
    empty_masks: usize,
    mean: MetricSummary,
}

fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    write_metrics(&dir.join(METRICS), report)?;
    let summary = EvalSummary {
        config_hash: &report.config_hash,
        volumes: report.volumes.len(),
        empty_masks: report.volumes.iter().filter(|v| v.empty_mask).count(),
        mean: report.mean,
    };
    let path = dir.join("summary.toml");
    let text = toml::to_string(&summary).map_err(|e| CliError::format(&path, e))?;
    write_file(&path, text.as_bytes())
}

#[derive(Serialize)]
struct FailureDump<'a> {
    error: String,
    epoch: usize,
    iteration: u64,
    checkpoint: &'a str,
}

/// Trains into `run`, writes `eval/` and returns the report.
pub fn train_run(
    config: &TrainConfig,
    run: &RunDir,
    resume: Option<&Path>,
    keep: usize,
    verbose: bool,
) -> Result<MetricReport> {
    let split = synthetic_split(config)?;
    let mut state = match resume {
        Some(dir) => {
            let s = load_checkpoint(dir, config)?;
            run.log(&format!("resumed from {} at epoch {}", dir.display(), s.epoch))?;
            s
        }
        None => TrainState::new(config)?,
    };
    let mut recorder = RunRecorder { run, config, keep, verbose };
    if let Err(e) = train(config, &split, &mut state, &mut recorder) {
        if let CliError::Numeric(msg) = &e {
            // Keep the state that produced the failure for inspection.
            let dir = run.path("checkpoints").join("failed");
            save_checkpoint(&dir, config, &state)?;
            let dump = FailureDump { error: msg.clone(), epoch: state.epoch, iteration: state.iteration, checkpoint: "checkpoints/failed" };
            let text = toml::to_string(&dump).map_err(|e| CliError::format(run.path("failure.toml"), e))?;
            write_file(&run.path("failure.toml"), text.as_bytes())?;
            run.log(&format!("numeric failure: {msg}"))?;
        }
        return Err(e);
    }
    let report = evaluate(&state.cs, &held_out_volumes(&split), &config.eval, &run.manifest.config_hash)?;
    write_report(&run.path("eval"), &report)?;
    Ok(report)
}

pub fn eval_checkpoint(ckpt: &Path, data: Option<&Path>, out: &Path, verbose: bool) -> Result<()> {
    let (config, _) = read_config(ckpt)?;
    let state = load_checkpoint(ckpt, &config)?;
    let volumes = match data {
        Some(dir) => {
            let (m, vols) = read_evaluation_volumes(dir)?;
            if m.num_classes != config.net.num_classes {
                return Err(CliError::Config(format!(
                    "dataset has {} classes, the checkpoint's network {}",
                    m.num_classes, config.net.num_classes
                )));
            }
            vols
        }
        None => held_out_volumes(&synthetic_split(&config)?),
    };
    let mut run = RunDir::create(out, "eval", &config, None)?;
    let hash = sha256_hex(to_toml(&config)?.as_bytes());
    let report = evaluate(&state.cs, &volumes, &config.eval, &hash)?;
    write_report(out, &report)?;
    if verbose {
        log::info!("{} volumes: {}", report.volumes.len(), summary_line(&report.mean));
    }
    run.finish()
}

/// The four rows of the ablation grid, by directory name and label.
pub fn ablation_rows(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let with = |cross_pseudo: bool, hfm: bool, contrastive: bool| {
        let mut c = base.clone();
        c.switches.cross_pseudo = cross_pseudo;
        c.switches.contrastive = contrastive;
        c.net.use_hfm = hfm;
        c
    };
    vec![
        ("supervised", with(false, false, false)),
        ("+cross-pseudo", with(true, false, false)),
        ("+hfm", with(true, true, false)),
        ("+contrastive", with(true, true, true)),
    ]
}

pub fn ablate(
    base: &TrainConfig,
    source: Option<&Path>,
    out: &Path,
    keep: usize,
    verbose: bool,
) -> Result<Vec<(String, MetricSummary)>> {
    let mut run = RunDir::create(out, "ablate", base, source)?;
    let mut rows = Vec::new();
    for (name, config) in ablation_rows(base) {
        let dir = out.join(name.trim_start_matches('+'));
        let mut sub = RunDir::create(&dir, &format!("ablate {name}"), &config, source)?;
        let report = train_run(&config, &sub, None, keep, verbose)?;
        sub.finish()?;
        rows.push((name.to_string(), report.mean));
        write_ablation(&out.join(ABLATION), &rows)?;
    }
    run.finish()?;
    Ok(rows)
}
