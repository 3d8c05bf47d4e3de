//! Commands behind the `clvsa` binary.
//!
//! Commands that write a directory lay it out as `manifest.json`, `logs/`,
//! `checkpoints/` and `reports/`, and write the manifest before computing.

pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::Serialize;
use thiserror::Error;

use clvsa::backtest::{self, BacktestError, BacktestReport, CostModel};
use clvsa::diffcore::OpKind;
use clvsa::gradsuite::{self, GradSuiteError, Scale, SuiteOptions, SuiteReport};
use clvsa::marketdata::{self, build_frames, plan_walk_forward, MarketDataError, TradingDay};
use clvsa::model::{ModelError, ModelKind};
use clvsa::trainer::{self, BacktestOptions, TrainError, WalkForwardResult};

pub use config::{DataConfig, ExperimentConfig, RunManifest};

pub const MANIFEST: &str = "manifest.json";
pub const SUBDIRS: [&str; 3] = ["logs", "checkpoints", "reports"];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Data {
        path: String,
        #[source]
        source: MarketDataError,
    },
    #[error(transparent)]
    Market(#[from] MarketDataError),
    #[error(transparent)]
    Backtest(#[from] BacktestError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    GradSuite(#[from] GradSuiteError),
    #[error("gradient check failed: worst relative error {worst:.3e} exceeds {tolerance:.0e}")]
    GradCheckFailed { worst: f64, tolerance: f64 },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 1 for computation failures, 2 for bad input or configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Train(e) if e.is_numerical() => 1,
            CliError::Train(TrainError::Model(ModelError::Diff(_))) => 1,
            CliError::GradSuite(GradSuiteError::UnknownScale(_)) => 2,
            CliError::GradSuite(_) | CliError::GradCheckFailed { .. } => 1,
            _ => 2,
        }
    }
}

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Write {
        path: path.display().to_string(),
        source,
    }
}

fn write_file<F>(path: &Path, fill: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let file = File::create(path).map_err(write_err(path))?;
    let mut w = BufWriter::new(file);
    fill(&mut w).and_then(|_| w.flush()).map_err(write_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    write_file(path, |w| writeln!(w, "{text}"))
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|source| CliError::Read {
        path: path.display().to_string(),
        source,
    })
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

/// Creates the fixed layout and writes the manifest into it.
pub fn init_run_dir(out: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    for d in SUBDIRS {
        let p = out.join(d);
        fs::create_dir_all(&p).map_err(write_err(&p))?;
    }
    write_json(&out.join(MANIFEST), manifest)
}

fn resolve_cost(preset: Option<&str>, configured: &CostModel) -> Result<CostModel, CliError> {
    match preset {
        None => Ok(configured.clone()),
        Some(name) => CostModel::preset(name).ok_or_else(|| CliError::Config(format!("unknown cost preset `{name}` (known: CL)"))),
    }
}

fn load_days(path: &Path, cfg: &DataConfig) -> Result<Vec<TradingDay>, CliError> {
    let series = marketdata::parse_csv(path).map_err(|source| match source {
        MarketDataError::Io { path, source } => CliError::Read { path, source },
        source => CliError::Data {
            path: display(path),
            source,
        },
    })?;
    if !series.gaps.is_empty() {
        info!("{}: {} gaps in the bar stream", path.display(), series.gaps.len());
    }
    let days = build_frames(&series.bars, cfg.frames_per_day);
    info!("{}: {} bars, {} complete days", path.display(), series.bars.len(), days.len());
    Ok(days)
}

fn write_backtest_reports(reports: &Path, r: &BacktestReport) -> Result<(), CliError> {
    let json = backtest::report_json(r)?;
    write_file(&reports.join("backtest.json"), |w| writeln!(w, "{json}"))?;
    write_file(&reports.join("equity.csv"), |w| backtest::write_equity_csv(&r.equity_curve, w))?;
    write_file(&reports.join("monthly.csv"), |w| backtest::write_monthly_csv(&r.monthly_returns, w))
}

fn write_walk_forward_reports(reports: &Path, wf: &WalkForwardResult, bt: &BacktestOptions) -> Result<(), CliError> {
    write_json(&reports.join("records.json"), &wf.records)?;
    write_file(&reports.join("predictions.csv"), |w| trainer::write_predictions_csv(&wf.predictions, w))?;
    write_file(&reports.join("prices.csv"), |w| trainer::write_prices_csv(&wf.predictions, w))?;
    let report = backtest::run_backtest(
        &trainer::prediction_rows(&wf.predictions),
        &trainer::price_rows(&wf.predictions),
        &bt.cost,
        bt.initial_capital,
    )?;
    write_backtest_reports(reports, &report)
}

fn manifest(command: &str, config_path: Option<&Path>, config: ExperimentConfig, out: &Path) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        config_path: config_path.map(display),
        model_kind: None,
        cost: config.backtest.cost.clone(),
        config,
        inputs: Vec::new(),
        out: display(out),
        seeds: Vec::new(),
    }
}

pub struct SynthArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
}

/// Writes synthetic bars in the canonical CSV schema.
pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load_or_default(args.config.as_deref())?;
    let bars = marketdata::generate_synthetic(&cfg.synth)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(write_err(parent))?;
    }
    write_file(&args.out, |w| marketdata::write_csv(&bars, w))?;
    info!("wrote {} bars to {}", bars.len(), args.out.display());
    Ok(())
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub model: ModelKind,
    pub seed: Option<u64>,
}

fn resolved(config: Option<&Path>, kind: ModelKind) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load_or_default(config)?;
    cfg.model = kind.apply(&cfg.model);
    Ok(cfg)
}

/// Walk-forward training; writes per-run logs and checkpoints, run records,
/// the stitched test predictions and their backtest.
pub fn cmd_train(args: &TrainArgs) -> Result<WalkForwardResult, CliError> {
    let cfg = resolved(args.config.as_deref(), args.model)?;
    let train_cfg = cfg.train_config(args.model, args.seed);
    train_cfg.validate()?;
    let mut m = manifest("train", args.config.as_deref(), cfg.clone(), &args.out);
    m.model_kind = Some(args.model);
    m.inputs = vec![display(&args.data)];
    m.seeds = vec![train_cfg.seed];
    m.config.train.seed = train_cfg.seed;
    let days = load_days(&args.data, &cfg.data)?;
    init_run_dir(&args.out, &m)?;
    let dates: Vec<_> = days.iter().map(|d| d.date).collect();
    let plan = plan_walk_forward(&dates, &cfg.data.split)?;
    info!("{} walk-forward sessions", plan.sessions.len());
    let started = Instant::now();
    let wf = trainer::run_walk_forward(&days, &plan, &train_cfg, &cfg.data.options(), &cfg.backtest, Some(&args.out))?;
    info!("trained in {:.1?}", started.elapsed());
    write_walk_forward_reports(&args.out.join("reports"), &wf, &cfg.backtest)?;
    Ok(wf)
}

pub struct BacktestArgs {
    pub config: Option<PathBuf>,
    pub predictions: PathBuf,
    pub prices: PathBuf,
    pub cost_preset: Option<String>,
    pub out: PathBuf,
}

/// Replays a prediction file against a price file.
pub fn cmd_backtest(args: &BacktestArgs) -> Result<BacktestReport, CliError> {
    let mut cfg = ExperimentConfig::load_or_default(args.config.as_deref())?;
    cfg.backtest.cost = resolve_cost(args.cost_preset.as_deref(), &cfg.backtest.cost)?;
    let mut m = manifest("backtest", args.config.as_deref(), cfg.clone(), &args.out);
    m.inputs = vec![display(&args.predictions), display(&args.prices)];
    let preds = backtest::read_predictions(open(&args.predictions)?)?;
    let prices = backtest::read_prices(open(&args.prices)?)?;
    init_run_dir(&args.out, &m)?;
    let report = backtest::run_backtest(&preds, &prices, &cfg.backtest.cost, cfg.backtest.initial_capital)?;
    write_backtest_reports(&args.out.join("reports"), &report)?;
    Ok(report)
}

pub struct GradcheckArgs {
    pub scale: Scale,
    pub seeds: usize,
    pub tamper: Option<String>,
    pub out: Option<PathBuf>,
}

/// Runs the gradient suite; fails when any component exceeds the tolerance.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<SuiteReport, CliError> {
    let fault = args
        .tamper
        .as_deref()
        .map(|name| name.parse::<OpKind>().map_err(|e| CliError::Config(e.to_string())))
        .transpose()?;
    let opts = SuiteOptions {
        scale: args.scale,
        seeds: args.seeds,
        fault,
        ..SuiteOptions::default()
    };
    if let Some(out) = &args.out {
        let mut m = manifest("gradcheck", None, ExperimentConfig::default(), out);
        m.seeds = (0..args.seeds as u64).collect();
        init_run_dir(out, &m)?;
    }
    let report = gradsuite::run_suite(&opts)?;
    print!("{}", report.table());
    if let Some(out) = &args.out {
        write_json(&out.join("reports").join("gradcheck.json"), &report)?;
    }
    if !report.passed() {
        return Err(CliError::GradCheckFailed {
            worst: report.max_rel_error(),
            tolerance: report.tolerance,
        });
    }
    Ok(report)
}

pub struct RepeatArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub model: ModelKind,
    pub seeds: Vec<u64>,
}

/// One walk-forward run per seed, then dispersion of MAP, AAR and Sharpe.
pub fn cmd_repeat(args: &RepeatArgs) -> Result<trainer::RepeatReport, CliError> {
    let cfg = resolved(args.config.as_deref(), args.model)?;
    let train_cfg = cfg.train_config(args.model, None);
    train_cfg.validate()?;
    if args.seeds.len() < 2 {
        return Err(TrainError::TooFewSeeds(args.seeds.len()).into());
    }
    let mut m = manifest("repeat", args.config.as_deref(), cfg.clone(), &args.out);
    m.model_kind = Some(args.model);
    m.inputs = vec![display(&args.data)];
    m.seeds = args.seeds.clone();
    let days = load_days(&args.data, &cfg.data)?;
    init_run_dir(&args.out, &m)?;
    let dates: Vec<_> = days.iter().map(|d| d.date).collect();
    let plan = plan_walk_forward(&dates, &cfg.data.split)?;
    let report = trainer::repeat_runs(
        &days,
        &plan,
        &train_cfg,
        &cfg.data.options(),
        &cfg.backtest,
        &args.seeds,
        Some(&args.out),
    )?;
    let reports = args.out.join("reports");
    for run in &report.runs {
        write_json(&reports.join(format!("seed-{}.json", run.seed)), run)?;
    }
    write_json(&reports.join("repeat.json"), &report)?;
    Ok(report)
}
