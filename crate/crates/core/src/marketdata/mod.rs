//! Bars to labeled, normalized day pairs: CSV ingestion, 30-minute frames,
//! z-scoring, log-return labels, consecutive-day pairing, walk-forward
//! planning and a synthetic market generator.

mod bars;
mod frames;
mod labels;
mod pairs;
mod splits;
mod synth;

pub use bars::{parse_csv, parse_csv_reader, write_csv, Bar, BarSeries, Gap, BAR_MINUTES, CSV_HEADER};
pub use frames::{
    apply_normalizer, build_frames, fit_normalizer, Frame, NormStats, TradingDay, ATTRIBUTES, FRAME_MINUTES, STD_FLOOR,
    STEPS,
};
pub use labels::{
    calibrate_lambda, class_shares, flat_share, frame_log_returns, label, Label, LabelThresholds, FLAT_TARGET,
    FLAT_TOLERANCE,
};
pub use pairs::{make_day_pairs, DayPair, ReversedDay, DEFAULT_MAX_GAP_DAYS};
pub use splits::{plan_walk_forward, DateRange, Session, SplitPlan, WalkForward};
pub use synth::{generate_market, generate_synthetic, Regime, SynthConfig, SyntheticMarket};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarketDataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad CSV header: {0}")]
    Header(String),
    #[error("line {line}: {reason}")]
    Row { line: u64, reason: String },
    #[error("line {line}: timestamp {timestamp} does not increase")]
    NonMonotonic { line: u64, timestamp: String },
    #[error("line {line}: OHLC values are inconsistent (need low <= open, close <= high)")]
    Ohlc { line: u64 },
    #[error("training split is empty")]
    EmptyTrainingSplit,
    #[error("close price {0} is not positive")]
    NonPositiveClose(f64),
    #[error("invalid thresholds: mu_c {mu_c}, lambda {lambda}")]
    Thresholds { mu_c: f64, lambda: f64 },
    #[error("{have} labeled transitions available, need at least {need}")]
    TooFewTransitions { have: usize, need: usize },
    #[error("every training return is identical; cannot balance classes")]
    DegeneratePrices,
    #[error("need at least 2 trading days, have {0}")]
    TooFewDays(usize),
    #[error("walk-forward plan needs {need} trading days, have {have}")]
    InsufficientData { have: usize, need: usize },
    #[error("walk-forward plan: {0}")]
    Split(String),
    #[error("synthetic config: {0}")]
    Synth(String),
}
