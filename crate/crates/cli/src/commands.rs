//! Argument parsing and the file-level behavior of each subcommand.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use whvi::bnn::{compute_metrics, Likelihood, LogRecord, Metrics};

use crate::checkpoint::{Checkpoint, ModelSpec};
use crate::config::{read_json, ApproxStudyConfig, BenchConfig, GpRunConfig, RunConfig};
use crate::data::{load_csv, Part, Scaling, Task};
use crate::error::{CliError, Result};
use crate::{plot, run};

#[derive(Debug, Parser)]
#[command(name = "whvi", version, about = "Walsh-Hadamard variational inference: training, evaluation and studies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write a checkpoint, log and test metrics.
    Train(TrainArgs),
    /// Print metrics of a checkpoint on a dataset as one JSON record.
    Eval(EvalArgs),
    /// Time the batch Walsh-Hadamard transform over a range of sizes.
    BenchFwht(StudyArgs),
    /// Fit the structured form to random matrices of growing size.
    ApproxStudy(StudyArgs),
    /// Train random-feature GP regression.
    GpTrain(TrainArgs),
    /// Render a JSON-lines log or a result CSV to SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the number of optimization steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Monte Carlo samples for the test metrics; defaults to the config.
    #[arg(long)]
    pub mc_test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Part::Test)]
    pub split: Part,
    /// Defaults to the checkpoint seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Defaults to the network's `mc_test`, or 64 for GP checkpoints.
    #[arg(long)]
    pub mc_test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    /// Optional JSON config; defaults are used when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// A `.jsonl` training log or a `.csv` result table.
    #[arg(long)]
    pub input: PathBuf,
    /// Output `.svg` file, or a directory to write `<input stem>.svg` into.
    #[arg(long)]
    pub out: PathBuf,
    /// Column for the horizontal axis (tables only).
    #[arg(long)]
    pub x: Option<String>,
    /// Column for the vertical axis (tables only).
    #[arg(long)]
    pub y: Option<String>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const BENCH_FILE: &str = "bench_fwht.csv";
pub const APPROX_FILE: &str = "approx_study.csv";

fn out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Streams log records to a JSON-lines file, keeping the first write error.
struct LogWriter {
    path: PathBuf,
    w: BufWriter<File>,
    err: Option<std::io::Error>,
}

impl LogWriter {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(Self { path, w: BufWriter::new(f), err: None })
    }

    fn push(&mut self, rec: &LogRecord) {
        if self.err.is_some() {
            return;
        }
        let line = serde_json::to_string(rec).expect("log records serialize");
        if let Err(e) = writeln!(self.w, "{line}") {
            self.err = Some(e);
        }
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.err.take() {
            return Err(CliError::io(&self.path, e));
        }
        self.w.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

fn write_json_line<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let s = serde_json::to_string(value).map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::write(path, format!("{s}\n")).map_err(|e| CliError::io(path, e))?;
    Ok(s)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Plot(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Runs one parsed command. Whatever it reports goes to stdout.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a).map(|s| println!("{s}")),
        Command::BenchFwht(a) => bench(&a),
        Command::ApproxStudy(a) => approx(&a),
        Command::GpTrain(a) => gp_train(&a),
        Command::Plot(a) => plot_cmd(&a),
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg: RunConfig = read_json(&a.config)?;
    let task = match cfg.network.likelihood {
        Likelihood::Gaussian => Task::Regression,
        Likelihood::Categorical => Task::Classification,
    };
    let mut ds = load_csv(&a.data, task)?;
    ds.resplit(cfg.split, Scaling::Standardize);
    let seed = a.seed.unwrap_or(cfg.seed);
    out_dir(&a.out)?;
    let mut log = LogWriter::create(a.out.join(LOG_FILE))?;
    let outcome = run::train_network(&cfg, &ds, seed, a.steps, |r| log.push(r))?;
    log.finish()?;
    Checkpoint::network(&outcome.model, seed, outcome.steps, ds.split, ds.scaling.clone())
        .save(&a.out.join(CHECKPOINT_FILE))?;
    if !ds.test_idx.is_empty() {
        let m = run::evaluate(&outcome.model, &ds.test()?, a.mc_test.unwrap_or(cfg.network.mc_test), seed)?;
        println!("{}", write_json_line(&a.out.join(METRICS_FILE), &m)?);
    }
    Ok(())
}

/// Metrics for a checkpoint as a JSON string.
pub fn eval(a: &EvalArgs) -> Result<String> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let seed = a.seed.unwrap_or(ck.seed);
    let metrics: Metrics = match &ck.model {
        ModelSpec::Network { config } => {
            let task = match config.likelihood {
                Likelihood::Gaussian => Task::Regression,
                Likelihood::Categorical => Task::Classification,
            };
            let mut ds = load_csv(&a.data, task)?;
            ds.resplit(ck.split, ck.input_scaling.kind);
            let data = ds.part_with(a.split, &ck.input_scaling)?;
            run::evaluate(&ck.to_network()?, &data, a.mc_test.unwrap_or(config.mc_test), seed)?
        }
        ModelSpec::GpRff { .. } => {
            let mut ds = load_csv(&a.data, Task::Regression)?;
            ds.resplit(ck.split, ck.input_scaling.kind);
            let data = ds.part_with(a.split, &ck.input_scaling)?;
            let ts = ck.target_scaling.ok_or_else(|| CliError::Usage("GP checkpoint lacks target scaling".into()))?;
            let pred = run::gp_predict(&ck.to_gp()?, ts, &data, a.mc_test.unwrap_or(64), seed)?;
            compute_metrics(&pred, &data.y)?
        }
    };
    serde_json::to_string(&metrics).map_err(|e| CliError::Usage(e.to_string()))
}

fn study_config<T: Default + serde::de::DeserializeOwned>(path: &Option<PathBuf>) -> Result<T> {
    path.as_deref().map_or_else(|| Ok(T::default()), read_json)
}

pub fn bench(a: &StudyArgs) -> Result<()> {
    let mut cfg: BenchConfig = study_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let rows = run::bench_fwht(&cfg)?;
    out_dir(&a.out)?;
    write_csv(&a.out.join(BENCH_FILE), &rows)?;
    for w in rows.windows(2) {
        println!("D={:>6} -> {:>6}: time ratio {:.2}", w[0].d, w[1].d, w[1].mean_ms / w[0].mean_ms);
    }
    Ok(())
}

pub fn approx(a: &StudyArgs) -> Result<()> {
    let mut cfg: ApproxStudyConfig = study_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let rows = run::approx_study(&cfg)?;
    out_dir(&a.out)?;
    write_csv(&a.out.join(APPROX_FILE), &rows)?;
    for (d, m) in run::approx_medians(&rows, &cfg.dims) {
        println!("D={d:>4}: median best_rmse {m:.4}");
    }
    Ok(())
}

pub fn gp_train(a: &TrainArgs) -> Result<()> {
    let cfg: GpRunConfig = read_json(&a.config)?;
    let mut ds = load_csv(&a.data, Task::Regression)?;
    ds.resplit(cfg.split, Scaling::UnitCube);
    let seed = a.seed.unwrap_or(cfg.seed);
    out_dir(&a.out)?;
    let outcome = run::gp_fit(&cfg, &ds.train()?, seed, a.steps)?;
    let mut log = LogWriter::create(a.out.join(LOG_FILE))?;
    outcome.log.iter().for_each(|r| log.push(r));
    log.finish()?;
    Checkpoint::gp(&outcome.model, seed, outcome.steps, ds.split, ds.scaling.clone(), outcome.target_scaling)
        .save(&a.out.join(CHECKPOINT_FILE))?;
    if !ds.test_idx.is_empty() {
        let test = ds.test()?;
        let pred = run::gp_predict(&outcome.model, outcome.target_scaling, &test, a.mc_test.unwrap_or(cfg.mc_test), seed)?;
        let m = compute_metrics(&pred, &test.y)?;
        println!("{}", write_json_line(&a.out.join(METRICS_FILE), &m)?);
    }
    Ok(())
}

pub fn plot_cmd(a: &PlotArgs) -> Result<()> {
    let out = if a.out.extension().is_some_and(|e| e == "svg") {
        if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            out_dir(parent)?;
        }
        a.out.clone()
    } else {
        out_dir(&a.out)?;
        let stem = a.input.file_stem().map_or_else(|| "plot".into(), |s| s.to_string_lossy().into_owned());
        a.out.join(format!("{stem}.svg"))
    };
    match a.input.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => plot::render_log(&out, &plot::read_log(&a.input)?)?,
        Some("csv") => {
            let (headers, rows) = plot::read_table(&a.input)?;
            plot::render_table(&out, &headers, &rows, a.x.as_deref(), a.y.as_deref())?;
        }
        _ => return Err(CliError::Usage("plot input must be a .jsonl log or a .csv table".into())),
    }
    println!("{}", out.display());
    Ok(())
}
