//! Command-line front end: dataset synthesis, training, evaluation,
//! ablation sweeps, and analysis exports.
//!
//! Every run directory receives the fully resolved experiment config
//! (`config.toml`), so a finished run re-executes bit-identically from its
//! own artifacts in single-threaded mode. Worker threads are controlled by
//! the `SMA_SNN_THREADS` environment variable; results do not depend on the
//! thread count, only wall time does.
//!
//! An experiment file looks like:
//!
//! ```toml
//! seed = 7
//! epochs = 50
//! batch-size = 16
//! loss = "rate-mse"
//!
//! [data]
//! source = "synth"
//! classes = 4
//! per-class = 60
//! width = 32
//! height = 32
//! events = 1200
//! noise = 0.05
//! train-ratio = 0.8333
//!
//! [optim]
//! lr = 1e-3
//! schedule = "constant"
//! [optim.kind.adam]
//! beta1 = 0.9
//! beta2 = 0.999
//!
//! [model]
//! kind = "vgg"
//! placement = "T3+L1"
//! timesteps = 8
//! classes = 4
//! input = [2, 32, 32]
//! ```
//!
//! The `[model]` table may be replaced by `model-path = "model.toml"`.

use crate::azo::AzoReport;
use crate::error::{Error, Result};
use crate::events::{load_dataset, save_dataset, split_dataset, synth_gestures, SynthConfig};
use crate::events::{bin_events, EventStream};
use crate::graph::{Graph, Mode};
use crate::model::config::{ModelConfig, Placement};
use crate::model::Model;
use crate::pgm::write_pgm;
use crate::rng::{derive, tag};
use crate::train::{
    evaluate, load_checkpoint, stack_time_major, train, LossKind, Optimizer, OptimSpec, Sample,
    TrainConfig,
};
use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const THREADS_ENV: &str = "SMA_SNN_THREADS";

/// Configure the global worker pool from `SMA_SNN_THREADS`. Call once at
/// startup; an unset variable keeps the library default.
pub fn init_threads() -> Result<()> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(()),
        Ok(v) => {
            let n: usize = v.parse().map_err(|_| {
                Error::Config(format!(
                    "{} must be a positive integer, got {:?}",
                    THREADS_ENV, v
                ))
            })?;
            if n == 0 {
                return Err(Error::Config(format!("{} must be >= 1", THREADS_ENV)));
            }
            // a second initialization (tests, embedding) keeps the first pool
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// experiment configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source")]
pub enum DataConfig {
    #[serde(rename = "synth", rename_all = "kebab-case")]
    Synth {
        classes: usize,
        per_class: usize,
        width: u16,
        height: u16,
        events: usize,
        noise: f64,
        /// Stratified train fraction.
        train_ratio: f64,
        /// Defaults to the experiment seed.
        #[serde(default)]
        data_seed: Option<u64>,
    },
    #[serde(rename = "manifest", rename_all = "kebab-case")]
    Manifest {
        /// Directory containing `manifest.csv` and the event files.
        path: String,
        train_ratio: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ExperimentConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Overrides the model's timestep count when set.
    #[serde(default)]
    pub timesteps: Option<usize>,
    #[serde(default)]
    pub early_stop: Option<f64>,
    pub data: DataConfig,
    pub loss: LossKind,
    pub optim: OptimSpec,
    #[serde(default)]
    pub model_path: Option<String>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(s)
            .map_err(|e| Error::Config(format!("experiment config parse error: {}", e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self)
            .map_err(|e| Error::Config(format!("experiment config serialize: {}", e)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        self.loss.validate()?;
        self.optim.validate()?;
        match &self.data {
            DataConfig::Synth {
                classes,
                per_class,
                train_ratio,
                ..
            } => {
                if *classes < 2 || *per_class < 2 {
                    return Err(Error::Config(
                        "synth data needs >= 2 classes and >= 2 samples per class".into(),
                    ));
                }
                if !(*train_ratio > 0.0 && *train_ratio < 1.0) {
                    return Err(Error::Config(format!(
                        "train ratio must lie in (0, 1), got {}",
                        train_ratio
                    )));
                }
            }
            DataConfig::Manifest { train_ratio, .. } => {
                if !(*train_ratio > 0.0 && *train_ratio < 1.0) {
                    return Err(Error::Config(format!(
                        "train ratio must lie in (0, 1), got {}",
                        train_ratio
                    )));
                }
            }
        }
        if self.model.is_none() && self.model_path.is_none() {
            return Err(Error::Config(
                "experiment config needs either an inline [model] table or model-path".into(),
            ));
        }
        Ok(())
    }

    /// The model config, resolving `model-path` relative to `base_dir` and
    /// applying the timestep override.
    pub fn resolve_model(&self, base_dir: &Path) -> Result<ModelConfig> {
        let mut cfg = match (&self.model, &self.model_path) {
            (Some(m), _) => m.clone(),
            (None, Some(p)) => {
                let path = base_dir.join(p);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                ModelConfig::from_toml_str(&text)?
            }
            (None, None) => unreachable!("validate checked this"),
        };
        if let Some(t) = self.timesteps {
            cfg.timesteps = t;
        }
        cfg.fill_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    /// A copy with the model inlined, suitable for a run directory.
    pub fn resolved(&self, model: &ModelConfig) -> ExperimentConfig {
        let mut out = self.clone();
        out.model = Some(model.clone());
        out.model_path = None;
        out
    }
}

fn source_streams(cfg: &ExperimentConfig, base_dir: &Path) -> Result<Vec<EventStream>> {
    match &cfg.data {
        DataConfig::Synth {
            classes,
            per_class,
            width,
            height,
            events,
            noise,
            data_seed,
            ..
        } => synth_gestures(&SynthConfig {
            classes: *classes,
            samples_per_class: *per_class,
            width: *width,
            height: *height,
            events_per_sample: *events,
            noise_rate: *noise,
            seed: data_seed.unwrap_or(cfg.seed),
        }),
        DataConfig::Manifest { path, .. } => load_dataset(&base_dir.join(path)),
    }
}

/// Bin the experiment's dataset into train/test sample lists.
pub fn load_samples(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    timesteps: usize,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let streams = source_streams(cfg, base_dir)?;
    let ratio = match &cfg.data {
        DataConfig::Synth { train_ratio, .. } => *train_ratio,
        DataConfig::Manifest { train_ratio, .. } => *train_ratio,
    };
    let (train_streams, test_streams) = split_dataset(&streams, ratio, cfg.seed)?;
    let bin = |ss: &[EventStream]| -> Result<Vec<Sample>> {
        ss.iter()
            .map(|s| Ok((bin_events(s, timesteps)?, s.label as usize)))
            .collect()
    };
    Ok((bin(&train_streams)?, bin(&test_streams)?))
}

// ---------------------------------------------------------------------------
// argument surface

#[derive(Debug, Parser)]
#[command(
    name = "sma-snn",
    about = "Spiking networks with multiscale attention: synthesize data, train, evaluate, ablate, analyze",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a synthetic gesture dataset (.evs files + manifest.csv).
    Synth(SynthArgs),
    /// Train a model from an experiment config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its experiment's test split.
    Eval(EvalArgs),
    /// Sweep one configuration axis and tabulate the results.
    Ablate(AblateArgs),
    /// Export heatmaps, spike counts, scale importance, or an AZO audit.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long = "per-class", default_value_t = 60)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub width: u16,
    #[arg(long, default_value_t = 32)]
    pub height: u16,
    #[arg(long, default_value_t = 1200)]
    pub events: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config TOML.
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory for checkpoints, metrics and the resolved config.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the experiment seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the model timestep count.
    #[arg(long)]
    pub timesteps: Option<usize>,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Experiment config; defaults to config.toml beside the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Where to write eval.csv and eval_layers.csv; defaults to the
    /// checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Base experiment config TOML.
    #[arg(long)]
    pub config: PathBuf,
    /// Axis to sweep.
    #[arg(long, value_parser = ["placement", "scales", "cr-tr", "rtr-rcr"])]
    pub axis: String,
    /// Comma-separated cells, e.g. "T1+L1,T3+L1" or "2,3,4,5" or "4:4,8:4".
    #[arg(long)]
    pub grid: String,
    /// Output directory for the comparison CSV and per-cell runs.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the experiment seed (shared by every cell).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Checkpoint to analyze.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Experiment config; defaults to config.toml beside the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated outputs:
    /// sfr-heatmap,spike-counts,scale-importance,azo-report.
    #[arg(long, default_value = "sfr-heatmap,spike-counts,scale-importance")]
    pub outputs: String,
    /// LIF layer for heatmaps; defaults to the first non-coding layer.
    #[arg(long)]
    pub layer: Option<String>,
    /// Forward mode for the azo-report output.
    #[arg(long, default_value = "train", value_parser = ["train", "eval"])]
    pub mode: String,
    /// Cap on analyzed samples.
    #[arg(long, default_value_t = 16)]
    pub limit: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(&a),
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Eval(a) => cmd_eval(&a),
        Cmd::Ablate(a) => cmd_ablate(&a),
        Cmd::Analyze(a) => cmd_analyze(&a),
    }
}

// ---------------------------------------------------------------------------
// synth

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        classes: args.classes,
        samples_per_class: args.per_class,
        width: args.width,
        height: args.height,
        events_per_sample: args.events,
        noise_rate: args.noise,
        seed: args.seed,
    };
    let streams = synth_gestures(&cfg)?;
    save_dataset(&args.out, &streams)?;
    println!(
        "wrote {} streams ({} classes x {}) to {}",
        streams.len(),
        args.classes,
        args.per_class,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

fn read_experiment(path: &Path) -> Result<(ExperimentConfig, PathBuf)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = ExperimentConfig::from_toml_str(&text)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((cfg, base))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let (mut exp, base) = read_experiment(&args.config)?;
    if let Some(seed) = args.seed {
        exp.seed = seed;
    }
    if let Some(t) = args.timesteps {
        exp.timesteps = Some(t);
    }
    let model_cfg = exp.resolve_model(&base)?;
    let (mut model, mut opt, start_epoch) = match &args.checkpoint {
        None => (
            Model::build(model_cfg.clone(), exp.seed)?,
            Optimizer::new(exp.optim)?,
            0,
        ),
        Some(ckpt) => {
            let (model, opt, meta) = load_checkpoint(ckpt)?;
            let done: usize = meta
                .get("epoch")
                .and_then(|s| s.parse().ok())
                .unwrap_or(0);
            (model, opt, done)
        }
    };
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let resolved = exp.resolved(&model.config);
    std::fs::write(args.out.join("config.toml"), resolved.to_toml_string()?)
        .map_err(|e| Error::io(args.out.join("config.toml"), e))?;
    let (train_set, test_set) = load_samples(&exp, &base, model.timesteps())?;
    let cfg = TrainConfig {
        epochs: exp.epochs,
        start_epoch,
        batch_size: exp.batch_size,
        loss: exp.loss,
        seed: exp.seed,
        early_stop: exp.early_stop,
    };
    let outcome = train(
        &mut model,
        &mut opt,
        &train_set,
        &test_set,
        &cfg,
        Some(&args.out),
    )?;
    println!(
        "trained {} epochs; best test accuracy {} at epoch {}; artifacts in {}",
        outcome.history.len() / 2,
        outcome.best_accuracy,
        outcome.best_epoch,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn sibling_config(checkpoint: &Path, explicit: &Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.clone());
    }
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let p = dir.join("config.toml");
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::Config(format!(
            "no --config given and {} does not exist",
            p.display()
        )))
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (mut model, _, _) = load_checkpoint(&args.checkpoint)?;
    let cfg_path = sibling_config(&args.checkpoint, &args.config)?;
    let (exp, base) = read_experiment(&cfg_path)?;
    let (_, test_set) = load_samples(&exp, &base, model.timesteps())?;
    let report = evaluate(&mut model, &test_set, exp.batch_size, exp.loss)?;
    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| args.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut summary = String::from("metric,value\n");
    summary.push_str(&format!("loss,{}\n", report.loss));
    summary.push_str(&format!("accuracy,{}\n", report.accuracy));
    summary.push_str(&format!("correct,{}\n", report.correct));
    summary.push_str(&format!("total,{}\n", report.total));
    std::fs::write(out_dir.join("eval.csv"), summary)
        .map_err(|e| Error::io(out_dir.join("eval.csv"), e))?;
    let mut layers = String::from("layer,mean_sfr,total_spikes\n");
    for ((path, sfr), (_, count)) in report.sfr.iter().zip(&report.spike_counts) {
        layers.push_str(&format!("{},{},{}\n", path, sfr, count));
    }
    std::fs::write(out_dir.join("eval_layers.csv"), layers)
        .map_err(|e| Error::io(out_dir.join("eval_layers.csv"), e))?;
    println!(
        "accuracy {} ({}/{}), loss {}; wrote eval.csv and eval_layers.csv to {}",
        report.accuracy,
        report.correct,
        report.total,
        report.loss,
        out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate

/// One parsed sweep cell.
#[derive(Debug, Clone, PartialEq)]
pub enum AblateCell {
    Placement(String),
    Scales(usize),
    CrTr { cr: usize, tr: usize },
    RtrRcr { rtr: f64, rcr: f64 },
}

/// Parse the `--grid` string for an axis. Placement cells are validated
/// eagerly; numeric cells must be positive.
pub fn parse_grid(axis: &str, grid: &str) -> Result<Vec<AblateCell>> {
    let items: Vec<&str> = grid
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        return Err(Error::Config(format!("empty grid {:?}", grid)));
    }
    let pair = |item: &str| -> Result<(f64, f64)> {
        let (a, b) = item
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("grid cell {:?} is not A:B", item)))?;
        let pa: f64 = a
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad grid number {:?}", a)))?;
        let pb: f64 = b
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad grid number {:?}", b)))?;
        if !(pa >= 1.0 && pb >= 1.0) {
            return Err(Error::Config(format!("grid cell {:?} must be >= 1", item)));
        }
        Ok((pa, pb))
    };
    items
        .into_iter()
        .map(|item| match axis {
            "placement" => {
                Placement::parse(item)?;
                Ok(AblateCell::Placement(item.to_string()))
            }
            "scales" => {
                let n: usize = item
                    .parse()
                    .map_err(|_| Error::Config(format!("bad scale count {:?}", item)))?;
                if n < 2 {
                    return Err(Error::Config(format!("scale count must be >= 2, got {}", n)));
                }
                Ok(AblateCell::Scales(n))
            }
            "cr-tr" => {
                let (a, b) = pair(item)?;
                if a.fract() != 0.0 || b.fract() != 0.0 {
                    return Err(Error::Config(format!("cr-tr cell {:?} must be integers", item)));
                }
                Ok(AblateCell::CrTr {
                    cr: a as usize,
                    tr: b as usize,
                })
            }
            "rtr-rcr" => {
                let (a, b) = pair(item)?;
                Ok(AblateCell::RtrRcr { rtr: a, rcr: b })
            }
            other => Err(Error::Config(format!("unknown ablation axis {:?}", other))),
        })
        .collect()
}

impl AblateCell {
    pub fn label(&self) -> String {
        match self {
            AblateCell::Placement(p) => p.clone(),
            AblateCell::Scales(n) => n.to_string(),
            AblateCell::CrTr { cr, tr } => format!("{}:{}", cr, tr),
            AblateCell::RtrRcr { rtr, rcr } => format!("{}:{}", rtr, rcr),
        }
    }

    /// Apply the cell to a model config.
    pub fn apply(&self, cfg: &mut ModelConfig) {
        match self {
            AblateCell::Placement(p) => cfg.placement = p.clone(),
            AblateCell::Scales(n) => {
                cfg.sma.scales = *n;
                cfg.sma.kernels = (0..*n).map(|i| 2 * i + 1).collect();
                for b in &mut cfg.blocks {
                    if let Some(s) = &mut b.sma {
                        s.scales = *n;
                        s.kernels = (0..*n).map(|i| 2 * i + 1).collect();
                    }
                }
            }
            AblateCell::CrTr { cr, tr } => {
                cfg.sma.cr = *cr;
                cfg.sma.tr = Some(*tr);
                for b in &mut cfg.blocks {
                    if let Some(s) = &mut b.sma {
                        s.cr = *cr;
                        s.tr = Some(*tr);
                    }
                }
            }
            AblateCell::RtrRcr { rtr, rcr } => {
                cfg.azo.enabled = true;
                cfg.azo.rtr = *rtr;
                cfg.azo.rcr = *rcr;
                for b in &mut cfg.blocks {
                    if let Some(a) = &mut b.azo {
                        a.enabled = true;
                        a.rtr = *rtr;
                        a.rcr = *rcr;
                    }
                }
            }
        }
    }
}

/// One ablation row; `status` is "ok" or "skipped".
#[derive(Debug, Clone)]
pub struct AblateRow {
    pub cell: String,
    pub status: String,
    pub note: String,
    pub param_count: Option<usize>,
    pub accuracy: Option<f64>,
    pub train_seconds: Option<f64>,
    pub infer_seconds_per_batch: Option<f64>,
}

pub fn ablate_csv(axis: &str, rows: &[AblateRow]) -> String {
    let mut out = String::from(
        "axis,cell,status,note,param_count,accuracy,train_seconds,infer_seconds_per_batch\n",
    );
    let opt = |o: &Option<String>| o.clone().unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            axis,
            r.cell,
            r.status,
            r.note,
            opt(&r.param_count.map(|v| v.to_string())),
            opt(&r.accuracy.map(|v| v.to_string())),
            opt(&r.train_seconds.map(|v| v.to_string())),
            opt(&r.infer_seconds_per_batch.map(|v| v.to_string())),
        ));
    }
    out
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let (mut exp, base) = read_experiment(&args.config)?;
    if let Some(seed) = args.seed {
        exp.seed = seed;
    }
    let cells = parse_grid(&args.axis, &args.grid)?;
    let base_model = exp.resolve_model(&base)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut rows = Vec::new();
    for cell in &cells {
        let mut cfg = base_model.clone();
        cell.apply(&mut cfg);
        let row = match run_ablate_cell(&exp, &base, cfg, cell, &args.out) {
            Ok(row) => row,
            Err(e) => AblateRow {
                cell: cell.label(),
                status: "skipped".into(),
                note: e.to_string().replace(',', ";"),
                param_count: None,
                accuracy: None,
                train_seconds: None,
                infer_seconds_per_batch: None,
            },
        };
        println!(
            "[{}] {} {}{}",
            args.axis,
            row.cell,
            row.status,
            row.accuracy
                .map(|a| format!(" accuracy {}", a))
                .unwrap_or_default()
        );
        rows.push(row);
    }
    let csv = ablate_csv(&args.axis, &rows);
    let path = args.out.join(format!("ablate_{}.csv", args.axis));
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_ablate_cell(
    exp: &ExperimentConfig,
    base: &Path,
    cfg: ModelConfig,
    cell: &AblateCell,
    out_root: &Path,
) -> Result<AblateRow> {
    let mut model = Model::build(cfg, exp.seed)?;
    let mut note = String::new();
    if let AblateCell::RtrRcr { rtr, rcr } = cell {
        let noop = model.sma_sites().iter().all(|(_, t, c)| {
            let dt = (*t as f64 / rtr).floor() as usize;
            let dc = (*c as f64 / rcr).floor() as usize;
            dt == 0 || dc == 0
        });
        if noop {
            note = "azo no-op: every site has delta_t or delta_c = 0".into();
        }
    }
    let (train_set, test_set) = load_samples(exp, base, model.timesteps())?;
    let mut opt = Optimizer::new(exp.optim)?;
    let tc = TrainConfig {
        epochs: exp.epochs,
        start_epoch: 0,
        batch_size: exp.batch_size,
        loss: exp.loss,
        seed: exp.seed,
        early_stop: exp.early_stop,
    };
    let cell_dir = out_root.join(format!("cell_{}", cell.label().replace([':', '+'], "_")));
    let started = Instant::now();
    let outcome = train(&mut model, &mut opt, &train_set, &test_set, &tc, Some(&cell_dir))?;
    let train_seconds = started.elapsed().as_secs_f64();
    let batch = &test_set[..exp.batch_size.min(test_set.len())];
    let t0 = Instant::now();
    evaluate(&mut model, batch, batch.len(), exp.loss)?;
    let infer = t0.elapsed().as_secs_f64();
    Ok(AblateRow {
        cell: cell.label(),
        status: "ok".into(),
        note,
        param_count: Some(model.param_count()),
        accuracy: Some(outcome.best_accuracy),
        train_seconds: Some(train_seconds),
        infer_seconds_per_batch: Some(infer),
    })
}

// ---------------------------------------------------------------------------
// analyze

fn analyze_outputs(list: &str) -> Result<Vec<String>> {
    let known = ["sfr-heatmap", "spike-counts", "scale-importance", "azo-report"];
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if !known.contains(&item) {
            return Err(Error::Config(format!(
                "unknown analyze output {:?}; expected one of {}",
                item,
                known.join(", ")
            )));
        }
        out.push(item.to_string());
    }
    if out.is_empty() {
        return Err(Error::Config("no analyze outputs requested".into()));
    }
    Ok(out)
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let (mut model, _, _) = load_checkpoint(&args.checkpoint)?;
    let cfg_path = sibling_config(&args.checkpoint, &args.config)?;
    let (exp, base) = read_experiment(&cfg_path)?;
    let (_, test_set) = load_samples(&exp, &base, model.timesteps())?;
    let samples = &test_set[..args.limit.min(test_set.len())];
    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| args.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    for output in analyze_outputs(&args.outputs)? {
        match output.as_str() {
            "sfr-heatmap" => export_sfr_heatmaps(&mut model, samples, &args.layer, &out_dir)?,
            "spike-counts" => export_spike_counts(&mut model, samples, &out_dir)?,
            "scale-importance" => export_scale_importance(&mut model, samples, &out_dir)?,
            "azo-report" => {
                let mode = if args.mode == "eval" { Mode::Eval } else { Mode::Train };
                export_azo_report(&mut model, samples, mode, &out_dir)?
            }
            _ => unreachable!(),
        }
        println!("analyze: wrote {} outputs to {}", output, out_dir.display());
    }
    Ok(())
}

fn eval_forward_one(
    model: &mut Model,
    sample: &Sample,
    mode: Mode,
    capture: &[String],
) -> Result<(Graph, crate::model::Forward)> {
    let mut g = Graph::new();
    let x = stack_time_major(&[&sample.0])?;
    let xv = g.constant(x);
    let mut rng = derive(0, &[tag("analyze")]);
    let fwd = model.forward_captured(&mut g, xv, mode, &mut rng, capture)?;
    Ok((g, fwd))
}

/// Default heatmap layer: the first spiking layer, which by construction
/// sits after the coding block.
fn default_heatmap_layer(model: &Model) -> Result<String> {
    model
        .lif_paths()
        .into_iter()
        .next()
        .ok_or_else(|| Error::Config("model has no LIF layers".into()))
}

fn export_sfr_heatmaps(
    model: &mut Model,
    samples: &[Sample],
    layer: &Option<String>,
    out_dir: &Path,
) -> Result<()> {
    let layer = match layer {
        Some(l) => {
            let known = model.lif_paths();
            if !known.contains(l) {
                return Err(Error::Config(format!(
                    "layer {:?} not found; spiking layers are: {}",
                    l,
                    known.join(", ")
                )));
            }
            l.clone()
        }
        None => default_heatmap_layer(model)?,
    };
    let mut csv = String::from("sample,y,x,sfr\n");
    for (i, sample) in samples.iter().enumerate() {
        let (_, fwd) = eval_forward_one(model, sample, Mode::Eval, &[layer.clone()])?;
        let (_, spikes) = fwd
            .captured
            .into_iter()
            .next()
            .ok_or_else(|| Error::Config(format!("layer {:?} produced no capture", layer)))?;
        let d = spikes.dims().to_vec();
        let (rows, c, h, w) = (d[0], d[1], d[2], d[3]);
        let data = spikes.data();
        let mut grid = vec![0.0f64; h * w];
        for r in 0..rows {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        grid[y * w + x] += data[((r * c + ci) * h + y) * w + x];
                    }
                }
            }
        }
        for v in &mut grid {
            *v /= (rows * c) as f64;
        }
        for y in 0..h {
            for x in 0..w {
                csv.push_str(&format!("{},{},{},{}\n", i, y, x, grid[y * w + x]));
            }
        }
        let name = format!("heatmap_{}_{:04}.pgm", layer.replace('.', "-"), i);
        write_pgm(&out_dir.join(name), &grid, w, h)?;
    }
    let csv_path = out_dir.join(format!("heatmap_{}.csv", layer.replace('.', "-")));
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}

fn export_spike_counts(model: &mut Model, samples: &[Sample], out_dir: &Path) -> Result<()> {
    let mut csv = String::from("sample,layer,spikes\n");
    for (i, sample) in samples.iter().enumerate() {
        let (_, fwd) = eval_forward_one(model, sample, Mode::Eval, &[])?;
        for s in &fwd.spikes {
            csv.push_str(&format!("{},{},{}\n", i, s.path, s.count));
        }
    }
    let path = out_dir.join("spike_counts.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn export_scale_importance(model: &mut Model, samples: &[Sample], out_dir: &Path) -> Result<()> {
    // class -> site -> (importance sums, count)
    let mut acc: IndexMap<usize, IndexMap<String, (Vec<f64>, usize)>> = IndexMap::new();
    for sample in samples {
        let (_, fwd) = eval_forward_one(model, sample, Mode::Eval, &[])?;
        let by_class = acc.entry(sample.1).or_default();
        for (site, trace) in &fwd.traces {
            let e = by_class
                .entry(site.clone())
                .or_insert_with(|| (vec![0.0; trace.importance.len()], 0));
            for (a, b) in e.0.iter_mut().zip(&trace.importance) {
                *a += b;
            }
            e.1 += 1;
        }
    }
    let mut csv = String::from("class,site,scale,importance\n");
    let mut classes: Vec<usize> = acc.keys().copied().collect();
    classes.sort_unstable();
    for class in classes {
        for (site, (sums, n)) in &acc[&class] {
            for (scale, s) in sums.iter().enumerate() {
                csv.push_str(&format!("{},{},{},{}\n", class, site, scale, s / *n as f64));
            }
        }
    }
    let path = out_dir.join("scale_importance.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn export_azo_report(
    model: &mut Model,
    samples: &[Sample],
    mode: Mode,
    out_dir: &Path,
) -> Result<()> {
    let mut csv = String::from("site,");
    csv.push_str(AzoReport::CSV_HEADER);
    for (i, sample) in samples.iter().enumerate() {
        let (_, fwd) = eval_forward_one(model, sample, mode, &[])?;
        for (site, reports) in &fwd.azo_reports {
            for r in reports {
                for line in r.csv_rows(i).lines() {
                    csv.push_str(&format!("{},{}\n", site, line));
                }
            }
        }
    }
    let path = out_dir.join("azo_report.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
