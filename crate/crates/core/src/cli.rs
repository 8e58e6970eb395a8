//! Command-line front end.
//!
//! Every command merges its flags over an optional JSON `--config` file
//! (flags win, unknown keys are rejected), echoes the resolved settings as
//! one JSON line, then runs. Exit codes: 0 success, 1 runtime or data
//! error, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::compress::{compress_model, parse_grid, parse_plan, rank_sweep, sweep_csv};
use crate::data::{generate_dataset, load_dataset, save_dataset, DatasetSpec, SkeletonSample};
use crate::error::Error;
use crate::finetune::{evaluate, train_with, TrainConfig};
use crate::model::{build_model, count_flops, count_params, load_model, save_model, ModelConfig, SkeletonModel};

pub const TRAIN_FILE: &str = "train.lrsk";
pub const TEST_FILE: &str = "test.lrsk";
pub const WEIGHTS_FILE: &str = "model.lrts";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Debug, Parser)]
#[command(name = "skelcompress", version, about = "Low-rank compression of skeleton-sequence attention classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train/test datasets.
    Gen(GenArgs),
    /// Train a classifier from scratch.
    Train(TrainArgs),
    /// Replace weight matrices with truncated SVD factor pairs.
    Compress(CompressArgs),
    /// Evaluate a grid of compression plans without fine-tuning.
    Sweep(SweepArgs),
    /// Fine-tune a (compressed) model.
    Finetune(FinetuneArgs),
    /// Summarize a weight file.
    Info(InfoArgs),
}

#[derive(Debug, Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GenArgs {
    /// Number of action classes
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<u32>,
    /// Training samples per class
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_per_class: Option<u32>,
    /// Test samples per class
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_per_class: Option<u32>,
    /// Frames per sequence
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames: Option<u32>,
    /// Joints per frame
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub joints: Option<u32>,
    /// Standard deviation of the additive Gaussian noise
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    /// Generator seed
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Output directory (receives train.lrsk and test.lrsk)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// JSON file with default values for these flags
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// Learning-rate schedule and optimizer flags shared by train and finetune.
#[derive(Debug, Args, Serialize, Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
pub struct ScheduleArgs {
    /// Number of epochs
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u32>,
    /// Base learning rate
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Comma-separated epochs at which the rate is multiplied by --decay
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub milestones: Option<Vec<usize>>,
    /// Multiplicative decay applied at each milestone
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay: Option<f64>,
    /// Linear warm-up length in epochs
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup: Option<usize>,
    /// Mini-batch size
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<u32>,
    /// SGD momentum (0 = plain SGD)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    /// Shuffle seed (train also uses it to initialize the model)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// Directory holding train.lrsk and test.lrsk
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Model width
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_model: Option<u32>,
    /// Attention heads per block
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<u32>,
    /// Number of attention blocks
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks: Option<u32>,
    #[command(flatten)]
    #[serde(flatten)]
    pub schedule: ScheduleArgs,
    /// Output directory (receives model.lrts and history.csv)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// JSON file with default values for these flags
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CompressArgs {
    /// Weight file to compress
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    /// Rank plan, e.g. "q=1,k=3" (groups: q, k, v, o, embed, head)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<String>,
    /// Output directory (receives model.lrts and report.csv)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// JSON file with default values for these flags
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SweepArgs {
    /// Weight file to sweep
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    /// Directory holding test.lrsk
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Grid file: one plan per line, '#' comments, "full" for no compression
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<PathBuf>,
    /// Output directory (receives sweep.csv)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// JSON file with default values for these flags
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FinetuneArgs {
    /// Weight file to fine-tune
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    /// Directory holding train.lrsk and test.lrsk
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub schedule: ScheduleArgs,
    /// Output directory (receives model.lrts and history.csv)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// JSON file with default values for these flags
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    /// Weight file to describe
    #[arg(long)]
    pub weights: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Overlays the flags that were given on top of the config file's values.
fn resolve<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> CliResult<T> {
    let mut merged = match config {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str::<serde_json::Value>(&text)
                .map_err(|e| usage(format!("config {} is not valid JSON: {e}", path.display())))?
        }
        None => serde_json::Value::Object(Default::default()),
    };
    let overrides = serde_json::to_value(flags).expect("flags serialize");
    match (&mut merged, overrides) {
        (serde_json::Value::Object(base), serde_json::Value::Object(over)) => base.extend(over),
        _ => return Err(usage("config file must hold a JSON object")),
    }
    serde_json::from_value(merged).map_err(|e| usage(format!("invalid config: {e}")))
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> CliResult<T> {
    v.clone().ok_or_else(|| usage(format!("--{flag} is required")))
}

/// Prints the fully resolved settings as a line `resolved <command> <json>`;
/// the JSON is itself a valid `--config` file for that command.
fn echo<T: Serialize>(command: &str, resolved: &T) {
    println!("resolved {command} {}", serde_json::to_string(resolved).expect("resolved config serializes"));
}

fn ensure_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.into()))
}

fn load_split(dir: &Path, name: &str) -> CliResult<Vec<SkeletonSample>> {
    Ok(load_dataset(dir.join(name))?)
}

fn schedule_config(s: &ScheduleArgs, defaults: TrainConfig) -> CliResult<TrainConfig> {
    let cfg = TrainConfig {
        base_lr: s.lr.unwrap_or(defaults.base_lr),
        decay_factor: s.decay.unwrap_or(defaults.decay_factor),
        milestones: s.milestones.clone().unwrap_or(defaults.milestones),
        warmup_epochs: s.warmup.unwrap_or(defaults.warmup_epochs),
        epochs: s.epochs.map_or(defaults.epochs, |e| e as usize),
        batch_size: s.batch.map_or(defaults.batch_size, |b| b as usize),
        momentum: s.momentum.unwrap_or(defaults.momentum),
        seed: s.seed.unwrap_or(defaults.seed),
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn schedule_args(cfg: &TrainConfig) -> ScheduleArgs {
    ScheduleArgs {
        epochs: Some(cfg.epochs as u32),
        lr: Some(cfg.base_lr),
        milestones: Some(cfg.milestones.clone()),
        decay: Some(cfg.decay_factor),
        warmup: Some(cfg.warmup_epochs),
        batch: Some(cfg.batch_size as u32),
        momentum: Some(cfg.momentum),
        seed: Some(cfg.seed),
    }
}

fn cmd_gen(args: &GenArgs) -> CliResult {
    let a = resolve(args, args.config.as_deref())?;
    let d = DatasetSpec::default();
    let spec = DatasetSpec {
        classes: a.classes.map_or(d.classes, |v| v as usize),
        train_per_class: a.train_per_class.map_or(d.train_per_class, |v| v as usize),
        test_per_class: a.test_per_class.map_or(d.test_per_class, |v| v as usize),
        frames: a.frames.map_or(d.frames, |v| v as usize),
        joints: a.joints.map_or(d.joints, |v| v as usize),
        noise_sigma: a.noise.unwrap_or(d.noise_sigma),
        seed: a.seed.unwrap_or(d.seed),
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let out = required(&a.out, "out")?;
    echo(
        "gen",
        &GenArgs {
            classes: Some(spec.classes as u32),
            train_per_class: Some(spec.train_per_class as u32),
            test_per_class: Some(spec.test_per_class as u32),
            frames: Some(spec.frames as u32),
            joints: Some(spec.joints as u32),
            noise: Some(spec.noise_sigma),
            seed: Some(spec.seed),
            out: Some(out.clone()),
            config: None,
        },
    );
    let data = generate_dataset(&spec)?;
    ensure_dir(&out)?;
    save_dataset(out.join(TRAIN_FILE), &data.train)?;
    save_dataset(out.join(TEST_FILE), &data.test)?;
    println!("train samples: {}", data.train.len());
    println!("test samples: {}", data.test.len());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> CliResult {
    let a = resolve(args, args.config.as_deref())?;
    let data = required(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    let cfg = schedule_config(&a.schedule, TrainConfig::default())?;
    let train_set = load_split(&data, TRAIN_FILE)?;
    let test_set = load_split(&data, TEST_FILE)?;
    let first = train_set.first().ok_or_else(|| Failure::Runtime(Error::Config("training set is empty".into())))?;
    let defaults = ModelConfig::default();
    let model_cfg = ModelConfig {
        joints: first.joints,
        frames: first.frames,
        d_model: a.d_model.map_or(defaults.d_model, |v| v as usize),
        heads: a.heads.map_or(defaults.heads, |v| v as usize),
        blocks: a.blocks.map_or(defaults.blocks, |v| v as usize),
        classes: train_set.iter().chain(&test_set).map(|s| s.label).max().unwrap_or(0) + 1,
        seed: cfg.seed,
    };
    model_cfg.validate().map_err(|e| usage(e.to_string()))?;
    echo(
        "train",
        &TrainArgs {
            data: Some(data.clone()),
            d_model: Some(model_cfg.d_model as u32),
            heads: Some(model_cfg.heads as u32),
            blocks: Some(model_cfg.blocks as u32),
            schedule: schedule_args(&cfg),
            out: Some(out.clone()),
            config: None,
        },
    );
    println!("model joints={} frames={} classes={} (from data)", model_cfg.joints, model_cfg.frames, model_cfg.classes);
    let model = build_model(&model_cfg)?;
    println!("untrained top1: {}", evaluate(&model, &test_set)?);
    let (trained, history) = train_with(&model, &train_set, &test_set, &cfg, print_epoch)?;
    ensure_dir(&out)?;
    save_model(out.join(WEIGHTS_FILE), &trained)?;
    fs::write(out.join(HISTORY_FILE), history.to_csv()).map_err(Error::from)?;
    println!("params: {}", count_params(&trained));
    println!("final top1: {}", history.records.last().map_or(0.0, |r| r.test_top1));
    Ok(())
}

fn print_epoch(r: &crate::finetune::EpochRecord) {
    println!("epoch {} lr {} loss {:.6} top1 {:.4}", r.epoch, r.lr, r.train_loss, r.test_top1);
}

fn cmd_compress(args: &CompressArgs) -> CliResult {
    let a = resolve(args, args.config.as_deref())?;
    let weights = required(&a.weights, "weights")?;
    let out = required(&a.out, "out")?;
    let plan_text = a.plan.clone().unwrap_or_default();
    let plan = parse_plan(&plan_text).map_err(|e| usage(e.to_string()))?;
    echo(
        "compress",
        &CompressArgs {
            weights: Some(weights.clone()),
            plan: Some(plan.render()),
            out: Some(out.clone()),
            config: None,
        },
    );
    let model = load_model(&weights)?;
    let (compressed, report) = compress_model(&model, &plan)?;
    ensure_dir(&out)?;
    save_model(out.join(WEIGHTS_FILE), &compressed)?;
    fs::write(out.join(REPORT_FILE), report.to_csv()).map_err(Error::from)?;
    println!("params: {} -> {}", report.params_before, report.params_after);
    println!("flops (T={}): {} -> {}", report.reference_frames, report.flops_before, report.flops_after);
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> CliResult {
    let a = resolve(args, args.config.as_deref())?;
    let weights = required(&a.weights, "weights")?;
    let data = required(&a.data, "data")?;
    let grid_path = required(&a.grid, "grid")?;
    let out = required(&a.out, "out")?;
    let text =
        fs::read_to_string(&grid_path).map_err(|e| usage(format!("cannot read grid {}: {e}", grid_path.display())))?;
    let grid = parse_grid(&text).map_err(|e| usage(e.to_string()))?;
    if grid.is_empty() {
        return Err(usage("grid file holds no plans"));
    }
    echo(
        "sweep",
        &SweepArgs {
            weights: Some(weights.clone()),
            data: Some(data.clone()),
            grid: Some(grid_path.clone()),
            out: Some(out.clone()),
            config: None,
        },
    );
    let model = load_model(&weights)?;
    let test_set = load_split(&data, TEST_FILE)?;
    let rows = rank_sweep(&model, &test_set, &grid)?;
    ensure_dir(&out)?;
    let csv = sweep_csv(&rows);
    fs::write(out.join(SWEEP_FILE), &csv).map_err(Error::from)?;
    print!("{csv}");
    Ok(())
}

fn cmd_finetune(args: &FinetuneArgs) -> CliResult {
    let a = resolve(args, args.config.as_deref())?;
    let weights = required(&a.weights, "weights")?;
    let data = required(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    let cfg = schedule_config(&a.schedule, TrainConfig::finetune_from(&TrainConfig::default()))?;
    echo(
        "finetune",
        &FinetuneArgs {
            weights: Some(weights.clone()),
            data: Some(data.clone()),
            schedule: schedule_args(&cfg),
            out: Some(out.clone()),
            config: None,
        },
    );
    let model = load_model(&weights)?;
    let train_set = load_split(&data, TRAIN_FILE)?;
    let test_set = load_split(&data, TEST_FILE)?;
    println!("starting top1: {}", evaluate(&model, &test_set)?);
    let (tuned, history) = train_with(&model, &train_set, &test_set, &cfg, print_epoch)?;
    ensure_dir(&out)?;
    save_model(out.join(WEIGHTS_FILE), &tuned)?;
    fs::write(out.join(HISTORY_FILE), history.to_csv()).map_err(Error::from)?;
    if let Some(best) = history.best() {
        println!("best top1: {} (epoch {})", best.test_top1, best.epoch);
    }
    println!("final top1: {}", history.records.last().map_or(0.0, |r| r.test_top1));
    Ok(())
}

fn describe(model: &SkeletonModel) -> String {
    let c = &model.config;
    let mut out = format!(
        "model: joints={} frames={} d_model={} heads={} blocks={} classes={}\n",
        c.joints, c.frames, c.d_model, c.heads, c.blocks, c.classes
    );
    out.push_str(&format!("{:<22} {:<8} {:>9} {:>5} {:>8}\n", "layer", "kind", "shape", "rank", "params"));
    for l in model.layers() {
        let (kind, rank) = match l.layer.rank() {
            Some(k) => ("lowrank", k.to_string()),
            None => ("dense", "full".to_string()),
        };
        let shape = format!("{}x{}", l.layer.in_dim(), l.layer.out_dim());
        out.push_str(&format!("{:<22} {:<8} {:>9} {:>5} {:>8}\n", l.name, kind, shape, rank, l.layer.param_count()));
    }
    out.push_str(&format!("total params: {}\n", count_params(model)));
    out.push_str(&format!("flops (T={}): {}\n", c.frames, count_flops(model, c.frames)));
    out
}

fn cmd_info(args: &InfoArgs) -> CliResult {
    let model = load_model(&args.weights)?;
    print!("{}", describe(&model));
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Compress(a) => cmd_compress(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Info(a) => cmd_info(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
