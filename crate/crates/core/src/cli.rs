//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 usage error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{dataset_stats, load_dir, subsample_labels, write_dir, SplitManifest, SplitSpec};
use crate::engine::{
    evaluate, features, read_traces, run_experiment, train_to_convergence, write_outputs,
    CycleTrace, RunConfig,
};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model, OptimState};
use crate::report::{self, ci95};
use crate::strategies::Strategy;
use crate::synth::{generate, SynthSpec};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "tkknn", version, about = "Balanced top-k KNN pseudo-labeling for self-training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic Gaussian-blob dataset directory
    Synth(SynthArgs),
    /// Withhold labels and write a split manifest
    Split(SplitArgs),
    /// Train a supervised model on the labeled split and save a checkpoint
    Train(TrainArgs),
    /// Run self-training over one or more seeds
    Selftrain(SelftrainArgs),
    /// Run self-training for each value of beta or k
    Sweep(SweepArgs),
    /// Summarize trace files into summary.json and convergence.csv
    Report(ReportArgs),
}

fn parse_unit(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is not in [0, 1]"))
    }
}

fn parse_open_unit(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is not in (0, 1]"))
    }
}

fn parse_positive(s: &str) -> std::result::Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 1 {
        Ok(v)
    } else {
        Err("must be >= 1".into())
    }
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = SynthSpec::default().num_classes)]
    pub classes: usize,
    #[arg(long, default_value_t = SynthSpec::default().dim)]
    pub dim: usize,
    #[arg(long, default_value_t = SynthSpec::default().per_class)]
    pub per_class: usize,
    #[arg(long, default_value_t = SynthSpec::default().radius)]
    pub radius: f64,
    #[arg(long, default_value_t = SynthSpec::default().noise)]
    pub noise: f64,
    #[arg(long, default_value_t = SynthSpec::default().hard_classes)]
    pub hard_classes: usize,
    #[arg(long, default_value_t = SynthSpec::default().hard_noise)]
    pub hard_noise: f64,
    #[arg(long, default_value_t = SynthSpec::default().overlap, value_parser = parse_unit)]
    pub overlap: f64,
    /// Same geometry for every class (overrides the hard-class flags)
    #[arg(long)]
    pub symmetric: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_open_unit)]
    pub label_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub unstratified: bool,
    /// Manifest path; defaults to <data>/split_seed<seed>.json
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Flags shared by every training command. Each overrides the config file.
#[derive(Debug, Args, Default)]
pub struct RunFlags {
    /// Dataset directory (train/val/test .jsonl + .tknn)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Flat JSON run config; flags given here take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    #[arg(long, value_parser = parse_positive)]
    pub k: Option<usize>,
    #[arg(long, value_parser = parse_unit)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_parser = parse_open_unit)]
    pub tau: Option<f64>,
    #[arg(long, value_parser = parse_positive)]
    pub cycles: Option<usize>,
    #[arg(long, value_parser = parse_positive)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub base_seed: Option<u64>,
    #[arg(long, value_parser = parse_open_unit)]
    pub label_fraction: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long, value_parser = parse_positive)]
    pub max_epochs: Option<usize>,
    #[arg(long, value_parser = parse_positive)]
    pub batch_size: Option<usize>,
    /// Worker threads for seeds and sweep points
    #[arg(long, value_parser = parse_positive)]
    pub jobs: Option<usize>,
}

impl RunFlags {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field { config.$field = v; }
            )*};
        }
        apply!(strategy, k, beta, gamma, tau, cycles, seeds, base_seed, label_fraction, lr,
               patience, max_epochs, batch_size);
        if let Some(data) = &self.data {
            config.data = Some(data.display().to_string());
        }
        if config.data.is_none() {
            return Err(Error::Config("no dataset: pass --data or set \"data\" in the config".into()));
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftrainArgs {
    #[command(flatten)]
    pub run: RunFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepParam {
    Beta,
    K,
}

/// A comma-separated list given as one argument.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueList(pub Vec<f64>);

fn parse_values(s: &str) -> std::result::Result<ValueList, String> {
    let values: Vec<f64> = s
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<f64>().map_err(|e| format!("{v:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if values.is_empty() {
        return Err("value list is empty".into());
    }
    Ok(ValueList(values))
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values, e.g. 0,0.25,0.5,0.75,1.0
    #[arg(long, value_parser = parse_values, allow_hyphen_values = true)]
    pub values: ValueList,
    #[command(flatten)]
    pub run: RunFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directories holding trace files (searched recursively for traces/*.jsonl)
    #[arg(long, required = true, num_args = 1..)]
    pub traces: Vec<PathBuf>,
    /// Output directory; defaults to the first --traces directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(Error::Config(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => synth(args),
        Command::Split(args) => split(args),
        Command::Train(args) => train(args),
        Command::Selftrain(args) => selftrain(args),
        Command::Sweep(args) => sweep(args),
        Command::Report(args) => report_cmd(args),
    }
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(f),
        None => f(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut spec = SynthSpec {
        num_classes: args.classes,
        dim: args.dim,
        per_class: args.per_class,
        radius: args.radius,
        noise: args.noise,
        hard_classes: args.hard_classes,
        hard_noise: args.hard_noise,
        overlap: args.overlap,
        seed: args.seed,
    };
    if args.symmetric {
        spec.hard_classes = 0;
        spec.overlap = 0.0;
    }
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let dataset = generate(&spec)?;
    write_dir(&dataset, &args.out)?;
    write_json(&args.out.join("synth.json"), &spec)?;
    print!("{}", dataset_stats(&dataset));
    Ok(())
}

fn split(args: SplitArgs) -> Result<()> {
    let dataset = load_dir(&args.data)?;
    let spec = SplitSpec {
        label_fraction: args.label_fraction,
        seed: args.seed,
        stratified: !args.unstratified,
    };
    let out = subsample_labels(&dataset, &spec)?;
    let manifest = SplitManifest::from_dataset(&out, &spec);
    let path = args
        .out
        .unwrap_or_else(|| args.data.join(format!("split_seed{}.json", args.seed)));
    manifest.write(&path)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", dataset_stats(&out));
    Ok(())
}

#[derive(Serialize)]
struct TrainMetrics {
    seed: u64,
    labeled: usize,
    epochs: usize,
    best_epoch: usize,
    val_accuracy: f64,
    test_accuracy: f64,
}

fn train(args: TrainArgs) -> Result<()> {
    let config = args.run.resolve()?;
    let dataset = load_dir(Path::new(config.data.as_deref().unwrap()))?;
    let seed = config.base_seed;
    let split = subsample_labels(
        &dataset,
        &SplitSpec {
            label_fraction: config.label_fraction,
            seed,
            stratified: config.stratified,
        },
    )?;
    create_dir(&args.out)?;
    std::fs::write(args.out.join("config.json"), config.to_json()?)
        .map_err(|e| Error::io(args.out.join("config.json"), e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(config.model_config(split.dim(), split.num_classes), &mut rng)?;
    let outcome = train_to_convergence(&mut model, &split.labeled, &split.validation, &config, &mut rng)?;
    let labels = |xs: &[crate::data::Example]| -> Vec<usize> {
        xs.iter().map(|e| e.label.unwrap_or(0)).collect()
    };
    let (val_accuracy, _) = evaluate(&model, &features(&split.validation), &labels(&split.validation))?;
    let (test_accuracy, _) = evaluate(&model, &features(&split.test), &labels(&split.test))?;
    let optim = OptimState::new(config.adam(), &model.params);
    Checkpoint { model, optim, rng }.save(&args.out.join("model.ckpt"))?;
    let metrics = TrainMetrics {
        seed,
        labeled: split.labeled.len(),
        epochs: outcome.epochs,
        best_epoch: outcome.best_epoch,
        val_accuracy,
        test_accuracy,
    };
    write_json(&args.out.join("metrics.json"), &metrics)?;
    println!("val {val_accuracy:.4} test {test_accuracy:.4} epochs {}", outcome.epochs);
    Ok(())
}

fn print_summary(summary: &report::Summary) {
    println!("strategy\tmean\tci95\tseeds");
    for (name, s) in &summary.strategies {
        let ci = s
            .ci_half_width
            .map_or_else(|| "null".to_string(), |h| format!("{h:.4}"));
        println!("{name}\t{:.4}\t{ci}\t{}", s.mean, s.per_seed.len());
    }
}

fn selftrain(args: SelftrainArgs) -> Result<()> {
    let config = args.run.resolve()?;
    let dataset = load_dir(Path::new(config.data.as_deref().unwrap()))?;
    let result = with_jobs(args.run.jobs, || run_experiment(&dataset, &config))?;
    write_outputs(&result, &args.out)?;
    print_summary(&result.summary);
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    param: &'static str,
    value: f64,
    k: usize,
    beta: f64,
    mean: f64,
    ci_half_width: Option<f64>,
}

fn sweep(args: SweepArgs) -> Result<()> {
    let base = args.run.resolve()?;
    let dataset = load_dir(Path::new(base.data.as_deref().unwrap()))?;
    let (name, configs) = match args.param {
        SweepParam::Beta => {
            let k = args.run.k.unwrap_or(6);
            let mut configs = Vec::new();
            for &beta in &args.values.0 {
                if !(0.0..=1.0).contains(&beta) {
                    return Err(Error::Config(format!("beta {beta} is not in [0, 1]")));
                }
                configs.push((beta, RunConfig { beta, k, ..base.clone() }));
            }
            ("beta", configs)
        }
        SweepParam::K => {
            let beta = args.run.beta.unwrap_or(0.75);
            let mut configs = Vec::new();
            for &k in &args.values.0 {
                if k < 1.0 || k.fract() != 0.0 {
                    return Err(Error::Config(format!("k must be a positive integer, got {k}")));
                }
                configs.push((k, RunConfig { k: k as usize, beta, ..base.clone() }));
            }
            ("k", configs)
        }
    };
    create_dir(&args.out)?;
    let results = with_jobs(args.run.jobs, || {
        use rayon::prelude::*;
        configs
            .par_iter()
            .map(|(v, c)| run_experiment(&dataset, c).map(|r| (*v, r)))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut writer = csv::Writer::from_path(args.out.join("sweep.csv"))?;
    for (value, result) in &results {
        let dir = args.out.join(format!("{name}={value}"));
        write_outputs(result, &dir)?;
        std::fs::copy(
            dir.join("convergence.csv"),
            args.out.join(format!("convergence_{name}_{value}.csv")),
        )
        .map_err(|e| Error::io(&dir, e))?;
        let s = result.summary.get(result.config.strategy.name()).expect("strategy summary");
        writer.serialize(SweepRow {
            param: name,
            value: *value,
            k: result.config.k,
            beta: result.config.beta,
            mean: s.mean,
            ci_half_width: s.ci_half_width,
        })?;
        println!("{name}={value}\tmean {:.4}", s.mean);
    }
    writer.flush().map_err(|e| Error::io(args.out.join("sweep.csv"), e))?;
    Ok(())
}

fn find_traces(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            find_traces(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "jsonl")
            && path.parent().and_then(|p| p.file_name()).is_some_and(|n| n == "traces")
        {
            out.push(path);
        }
    }
    Ok(())
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    let mut files = Vec::new();
    for dir in &args.traces {
        find_traces(dir, &mut files)?;
    }
    if files.is_empty() {
        return Err(Error::InvalidInput("no trace files found".into()));
    }
    let traces: Vec<Vec<CycleTrace>> = files
        .iter()
        .map(|f| read_traces(f))
        .collect::<Result<_>>()?;
    let summary = report::summarize(&traces);
    let out = args.out.unwrap_or_else(|| args.traces[0].clone());
    create_dir(&out)?;
    std::fs::write(out.join("summary.json"), summary.to_json()?)
        .map_err(|e| Error::io(out.join("summary.json"), e))?;
    let csv_path = out.join("convergence.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    report::emit_convergence(&traces, file)?;
    print_summary(&summary);
    let finals: Vec<f64> = traces.iter().filter_map(|t| t.last()).map(|t| t.test_accuracy).collect();
    log::debug!("pooled final accuracy {:?}", ci95(&finals));
    Ok(())
}
