use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use clvsa::gradsuite::{Scale, DEFAULT_SEEDS};
use clvsa::model::ModelKind;
use clvsa_cli::{
    cmd_backtest, cmd_gradcheck, cmd_repeat, cmd_synth, cmd_train, BacktestArgs, CliError, GradcheckArgs, RepeatArgs,
    SynthArgs, TrainArgs,
};

#[derive(Parser)]
#[command(name = "clvsa", version, about = "Train and backtest CLVSA intraday classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic regime-switching bars as CSV.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Walk-forward training and test-window backtest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "clvsa")]
        model: ModelKind,
        /// Overrides the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Backtest a prediction file against frame close prices.
    Backtest {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        prices: PathBuf,
        /// Named cost model, e.g. CL; defaults to the config's.
        #[arg(long)]
        cost_preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value = "toy")]
        scale: Scale,
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: usize,
        /// Corrupt one backward rule to prove the check bites.
        #[arg(long, hide = true)]
        tamper: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat walk-forward training over several seeds and report dispersion.
    Repeat {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "clvsa")]
        model: ModelKind,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, out } => cmd_synth(&SynthArgs { config, out }),
        Command::Train {
            config,
            data,
            out,
            model,
            seed,
        } => cmd_train(&TrainArgs {
            config,
            data,
            out,
            model,
            seed,
        })
        .map(|_| ()),
        Command::Backtest {
            config,
            predictions,
            prices,
            cost_preset,
            out,
        } => cmd_backtest(&BacktestArgs {
            config,
            predictions,
            prices,
            cost_preset,
            out,
        })
        .map(|r| println!("final equity {} over {} trades", r.final_equity, r.trades.len())),
        Command::Gradcheck {
            scale,
            seeds,
            tamper,
            out,
        } => cmd_gradcheck(&GradcheckArgs {
            scale,
            seeds,
            tamper,
            out,
        })
        .map(|_| ()),
        Command::Repeat {
            config,
            data,
            out,
            model,
            seeds,
        } => cmd_repeat(&RepeatArgs {
            config,
            data,
            out,
            model,
            seeds,
        })
        .map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
