//! Subcommands of the `rupformer` binary.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rupformer_core::kpi::{chronological_split, make_samples, KpiSeries, Normalizer};
use rupformer_core::metrics::{evaluate, spaced_anchors};
use rupformer_core::rollout::{rollout, RolloutState};
use rupformer_core::synth::{default_profiles, generate};
use rupformer_core::time::{Timestamp, STEP_SECS};
use rupformer_core::train::{train, EpochRecord};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::csv_io::{load_csv, parse_timestamp, write_csv};
use crate::error::{Error, Result};
use crate::forecast::write_forecast_csv;
use crate::fsutil;
use crate::report::{emit_plot_svg, sha256_hex, write_report};

#[derive(Debug, Parser)]
#[command(name = "rupformer", version, about = "Residual-PRB forecasting for LTE carriers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic KPI traffic as CSV.
    Gen(GenArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Forecast one carrier from a given instant.
    Forecast(ForecastArgs),
    /// Evaluate recursive forecasts against held-out data.
    Eval(EvalArgs),
}

#[derive(Debug, clap::Args)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub days: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=21))]
    pub carriers: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite an existing output file.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// KPI CSV; defaults to `data.csv_path` of the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON lines file with one record per epoch.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=20))]
    pub carrier: u64,
    /// Instant of the first forecast step; the preceding steps form the window.
    #[arg(long)]
    pub from: String,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub horizon: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 96, value_parser = clap::value_parser!(u64).range(1..))]
    pub horizon: u64,
    /// Rollout anchors per carrier, spread evenly over the evaluated span.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub anchors: u64,
    #[arg(long)]
    pub report: PathBuf,
    /// Writes one SVG per carrier for its first anchor.
    #[arg(long)]
    pub plot_dir: Option<PathBuf>,
    /// Evaluate only the test part of this configuration's split.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Forecast(a) => cmd_forecast(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

fn stdout_line(line: &str) -> Result<()> {
    writeln!(std::io::stdout(), "{line}").map_err(|e| Error::io("<stdout>", e))
}

pub fn cmd_gen(a: &GenArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if a.out.exists() && !a.force {
        return Err(Error::Usage(format!("{} exists; pass --force to overwrite", a.out.display())));
    }
    let seed = a.seed.unwrap_or(cfg.seed);
    let days = a.days.map_or(cfg.data.days, |d| d as usize);
    let start = parse_timestamp(&cfg.data.start).map_err(Error::Usage)?;
    let profiles = match (&cfg.data.profiles, a.carriers) {
        (Some(p), None) => p.clone(),
        (Some(_), Some(_)) => return Err(Error::Usage("--carriers conflicts with data.profiles".into())),
        (None, c) => default_profiles(c.map_or(cfg.data.carriers, |c| c as usize), seed)?,
    };
    let series = generate(&profiles, start, days, seed)?;
    write_csv(&series, &a.out)?;
    let rows: usize = series.iter().map(KpiSeries::len).sum();
    stdout_line(&format!("wrote {rows} rows to {}", a.out.display()))
}

fn history_jsonl(history: &[EpochRecord]) -> String {
    history.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let data = a
        .data
        .clone()
        .or_else(|| cfg.data.csv_path.clone())
        .ok_or_else(|| Error::Usage("no training data: pass --data or set data.csv_path".into()))?;
    let series = load_csv(&data)?;
    let hp = cfg.hyperparams.clone();
    let window = hp.input_len + hp.output_len;
    let split = chronological_split(&series, cfg.split.plan(), window)?;
    let normalizer = Normalizer::fit(&split.train)?;
    let train_samples = make_samples(&split.train, &normalizer, hp.input_len, hp.output_len, cfg.data.stride)?;
    let val_samples = make_samples(&split.val, &normalizer, hp.input_len, hp.output_len, cfg.data.stride)?;
    log::info!(
        "{} carriers, {} training and {} validation samples",
        series.len(),
        train_samples.len(),
        val_samples.len()
    );

    let train_config = cfg.train_config();
    let mut history = Vec::new();
    let mut sink_error = None;
    let outcome = train(&train_samples, &val_samples, hp, &train_config, &mut |r| {
        history.push(r.clone());
        if let (Some(path), None) = (&a.history, &sink_error) {
            sink_error = fsutil::write_atomic(path, history_jsonl(&history).as_bytes()).err();
        }
    })?;
    if let Some(e) = sink_error {
        return Err(e);
    }
    let ckpt = Checkpoint { model: outcome.model, train_config, normalizer };
    ckpt.save(&a.out)?;
    stdout_line(&format!(
        "best epoch {} of {}, validation loss {:.6}; wrote {}",
        outcome.best_epoch,
        outcome.history.len(),
        outcome.best_val_loss,
        a.out.display()
    ))
}

/// Index of `ts` in `series`, allowing the instant right after the last record.
fn grid_index(series: &KpiSeries, ts: Timestamp) -> Result<usize> {
    let first = series.records.first().ok_or_else(|| Error::Usage("empty series".into()))?.timestamp;
    let offset = ts.0 - first.0;
    if offset < 0 || offset % STEP_SECS != 0 || (offset / STEP_SECS) as usize > series.len() {
        return Err(Error::Usage(format!(
            "--from {ts} is not a 15-minute step within carrier {}'s data ({} to {})",
            series.carrier_id,
            first,
            first.add_steps(series.len() as i64)
        )));
    }
    Ok((offset / STEP_SECS) as usize)
}

pub fn cmd_forecast(a: &ForecastArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.model)?;
    let series = load_csv(&a.data)?;
    let carrier = a.carrier as usize;
    let s = series
        .iter()
        .find(|s| s.carrier_id == carrier)
        .ok_or_else(|| Error::Usage(format!("carrier {carrier} is not in {}", a.data.display())))?;
    let from = parse_timestamp(&a.from).map_err(Error::Usage)?;
    let idx = grid_index(s, from)?;
    let n = ckpt.model.hyperparams().input_len;
    if idx < n {
        return Err(Error::Usage(format!(
            "forecasting from {from} needs {n} observations before it, carrier {carrier} has {idx}"
        )));
    }
    let state = RolloutState::from_records(&s.records[idx - n..idx], &ckpt.normalizer)?;
    let forecasts = rollout(&ckpt.model, state, a.horizon as usize)?;
    write_forecast_csv(&forecasts, &ckpt.normalizer, &a.out)?;
    stdout_line(&format!("wrote {} forecast steps to {}", forecasts.len(), a.out.display()))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let bytes = fsutil::read(&a.model)?;
    let ckpt = Checkpoint::from_bytes(&bytes).map_err(|source| Error::Checkpoint { path: a.model.clone(), source })?;
    let mut series = load_csv(&a.data)?;
    if let Some(path) = &a.config {
        let cfg = RunConfig::load(path)?;
        series = chronological_split(&series, cfg.split.plan(), 1)?.test;
    }
    let horizon = a.horizon as usize;
    let n = ckpt.model.hyperparams().input_len;
    let shortest = series.iter().map(KpiSeries::len).min().unwrap_or(0);
    let anchors = spaced_anchors(shortest, n, horizon, a.anchors as usize);
    if anchors.is_empty() {
        return Err(Error::Usage(format!(
            "evaluation needs {n} history and {horizon} future steps per carrier, the shortest has {shortest}"
        )));
    }
    let mut report = evaluate(&ckpt.model, &ckpt.normalizer, &series, horizon, &anchors)?;
    report.metadata.model_hash = sha256_hex(&bytes);
    write_report(&report, &a.report)?;
    if let Some(dir) = &a.plot_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for t in &report.trajectories {
            emit_plot_svg(t, &plot_path(dir, t.carrier_id))?;
        }
    }
    stdout_line(&format!(
        "mean MAE {:.4}, MAE std {:.4}, mean hit probability {:.4}",
        report.aggregate.mean_mae, report.aggregate.mae_std, report.aggregate.mean_hit_prob
    ))
}

fn plot_path(dir: &Path, carrier: usize) -> PathBuf {
    dir.join(format!("carrier_{carrier:02}.svg"))
}
