//! Turns chronological class predictions into one-contract trades and scores
//! them: P&L, equity curve, MAP, annualized return, Sharpe ratio, monthly
//! returns and run-to-run dispersion.

use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::marketdata::Label;

pub const INITIAL_CAPITAL: f64 = 100_000.0;
pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;
pub const DAYS_PER_YEAR: f64 = 365.25;
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M";

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("no predictions")]
    Empty,
    #[error("misaligned input at {timestamp}: {reason}")]
    Misaligned { timestamp: String, reason: String },
    #[error("price {price} at {timestamp} is not positive")]
    NonPositivePrice { timestamp: String, price: f64 },
    #[error("{predictions} predictions but {truth} truth labels")]
    LengthMismatch { predictions: usize, truth: usize },
    #[error("need at least 2 values, got {0}")]
    TooFewValues(usize),
    #[error("mean is zero; coefficient of variation undefined")]
    ZeroMean,
    #[error("calendar span must be positive")]
    ZeroSpan,
    #[error("cost model: {0}")]
    Cost(String),
    #[error("line {line}: {reason}")]
    Row { line: u64, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub instrument: String,
    /// Charged once per closed trade, per contract.
    pub round_trip_cost: f64,
    pub multiplier: f64,
}

impl CostModel {
    pub fn new(instrument: &str, round_trip_cost: f64, multiplier: f64) -> Result<Self, BacktestError> {
        if !(round_trip_cost >= 0.0) || !round_trip_cost.is_finite() {
            return Err(BacktestError::Cost(format!("cost {round_trip_cost} must be nonnegative")));
        }
        if !(multiplier > 0.0) || !multiplier.is_finite() {
            return Err(BacktestError::Cost(format!("multiplier {multiplier} must be positive")));
        }
        Ok(Self {
            instrument: instrument.to_string(),
            round_trip_cost,
            multiplier,
        })
    }

    /// Crude oil: $85.5 per round trip, 1,000 barrels per contract.
    pub fn crude_oil() -> Self {
        Self {
            instrument: "CL".into(),
            round_trip_cost: 85.5,
            multiplier: 1000.0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_uppercase().as_str() {
            "CL" => Some(Self::crude_oil()),
            _ => None,
        }
    }
}

impl Default for CostModel {
    fn default() -> Self {
        Self::crude_oil()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Long,
    Short,
}

impl Direction {
    fn of(label: Label) -> Option<Direction> {
        match label {
            Label::Up => Some(Direction::Long),
            Label::Down => Some(Direction::Short),
            Label::Flat => None,
        }
    }
}

/// Profit of one closed one-contract trade after costs.
pub fn trade_pnl(direction: Direction, entry: f64, exit: f64, cost: &CostModel) -> Result<f64, BacktestError> {
    if !(entry > 0.0) || !(exit > 0.0) {
        return Err(BacktestError::NonPositivePrice {
            timestamp: String::new(),
            price: entry.min(exit),
        });
    }
    let points = match direction {
        Direction::Long => exit - entry,
        Direction::Short => entry - exit,
    };
    Ok(points * cost.multiplier - cost.round_trip_cost)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeRecord {
    pub direction: Direction,
    pub entry_time: NaiveDateTime,
    pub exit_time: NaiveDateTime,
    pub entry_price: f64,
    pub exit_price: f64,
    pub pnl: f64,
}

/// A prediction made at a frame's close, with that close.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub timestamp: NaiveDateTime,
    pub price: f64,
    pub prediction: Label,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquityPoint {
    pub timestamp: NaiveDateTime,
    pub equity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonthlyReturn {
    /// `YYYY-MM`.
    pub month: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub cost: CostModel,
    pub initial_capital: f64,
    pub trades: Vec<TradeRecord>,
    /// Mark-to-market equity after each signal.
    pub equity_curve: Vec<EquityPoint>,
    pub final_equity: f64,
    pub cumulative_return: f64,
    /// Simple annualized return; `None` when the signals span no time.
    pub aar: Option<f64>,
    /// `None` when fewer than two daily returns exist or they do not vary.
    pub sharpe: Option<f64>,
    pub monthly_returns: Vec<MonthlyReturn>,
    /// Macro precision against the truth labels, when they were supplied.
    pub map: Option<f64>,
}

fn check_signals(signals: &[Signal]) -> Result<(), BacktestError> {
    if signals.is_empty() {
        return Err(BacktestError::Empty);
    }
    for (i, s) in signals.iter().enumerate() {
        if !(s.price > 0.0) || !s.price.is_finite() {
            return Err(BacktestError::NonPositivePrice {
                timestamp: s.timestamp.format(TIMESTAMP_FORMAT).to_string(),
                price: s.price,
            });
        }
        if i > 0 && s.timestamp <= signals[i - 1].timestamp {
            return Err(BacktestError::Misaligned {
                timestamp: s.timestamp.format(TIMESTAMP_FORMAT).to_string(),
                reason: "timestamps must increase".into(),
            });
        }
    }
    Ok(())
}

/// Trades one contract on the signals.
///
/// Up opens a long, Down a short; the opposite signal closes the open trade
/// and reverses at the same close; Flat holds. The last signal only closes
/// whatever is open, so no trade starts and ends on the same bar.
pub fn simulate(signals: &[Signal], cost: &CostModel, initial_capital: f64) -> Result<BacktestReport, BacktestError> {
    check_signals(signals)?;
    let mut trades: Vec<TradeRecord> = Vec::new();
    let mut open: Option<(Direction, NaiveDateTime, f64)> = None;
    let mut realized = 0.0;
    let mut curve = Vec::with_capacity(signals.len());
    let last = signals.len() - 1;
    for (i, s) in signals.iter().enumerate() {
        let wanted = if i == last { None } else { Direction::of(s.prediction) };
        let close_now = match (open, wanted) {
            (Some(_), _) if i == last => true,
            (Some((d, _, _)), Some(w)) => d != w,
            _ => false,
        };
        if close_now {
            let (d, t0, p0) = open.take().expect("open position");
            let pnl = trade_pnl(d, p0, s.price, cost)?;
            realized += pnl;
            trades.push(TradeRecord {
                direction: d,
                entry_time: t0,
                exit_time: s.timestamp,
                entry_price: p0,
                exit_price: s.price,
                pnl,
            });
        }
        if open.is_none() {
            if let Some(w) = wanted {
                open = Some((w, s.timestamp, s.price));
            }
        }
        let unrealized = match open {
            Some((Direction::Long, _, p0)) => (s.price - p0) * cost.multiplier,
            Some((Direction::Short, _, p0)) => (p0 - s.price) * cost.multiplier,
            None => 0.0,
        };
        curve.push(EquityPoint {
            timestamp: s.timestamp,
            equity: initial_capital + realized + unrealized,
        });
    }
    let final_equity = initial_capital + realized;
    let span = (signals[last].timestamp - signals[0].timestamp).num_seconds() as f64 / 86_400.0;
    let monthly = monthly_returns(&curve, initial_capital);
    let sharpe = sharpe_ratio(&daily_returns(&curve, initial_capital));
    Ok(BacktestReport {
        cost: cost.clone(),
        initial_capital,
        trades,
        equity_curve: curve,
        final_equity,
        cumulative_return: (final_equity - initial_capital) / initial_capital,
        aar: annual_return(initial_capital, final_equity, span).ok(),
        sharpe,
        monthly_returns: monthly,
        map: None,
    })
}

/// Macro-averaged precision over Up, Flat and Down; a class never predicted
/// contributes zero.
pub fn mean_average_precision(predictions: &[Label], truth: &[Label]) -> Result<f64, BacktestError> {
    if predictions.len() != truth.len() {
        return Err(BacktestError::LengthMismatch {
            predictions: predictions.len(),
            truth: truth.len(),
        });
    }
    if predictions.is_empty() {
        return Err(BacktestError::Empty);
    }
    let mut total = 0.0;
    for class in Label::ALL {
        let predicted = predictions.iter().filter(|p| **p == class).count();
        let hits = predictions.iter().zip(truth).filter(|(p, t)| **p == class && **t == class).count();
        if predicted > 0 {
            total += hits as f64 / predicted as f64;
        }
    }
    Ok(total / Label::ALL.len() as f64)
}

/// `(final / initial − 1) · 365.25 / span_days`, without compounding.
pub fn annual_return(initial_capital: f64, final_equity: f64, span_days: f64) -> Result<f64, BacktestError> {
    if !(span_days > 0.0) {
        return Err(BacktestError::ZeroSpan);
    }
    Ok((final_equity / initial_capital - 1.0) * DAYS_PER_YEAR / span_days)
}

fn day_end_equity(curve: &[EquityPoint]) -> Vec<(NaiveDate, f64)> {
    let mut out: Vec<(NaiveDate, f64)> = Vec::new();
    for p in curve {
        let d = p.timestamp.date();
        match out.last_mut() {
            Some((last, e)) if *last == d => *e = p.equity,
            _ => out.push((d, p.equity)),
        }
    }
    out
}

/// Returns of day-end equity, the first measured against `initial_capital`.
pub fn daily_returns(curve: &[EquityPoint], initial_capital: f64) -> Vec<f64> {
    let mut prev = initial_capital;
    day_end_equity(curve)
        .into_iter()
        .map(|(_, e)| {
            let r = (e - prev) / prev;
            prev = e;
            r
        })
        .collect()
}

/// Sample mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

/// `mean / std · √252` with zero risk-free rate; `None` for fewer than two
/// returns or zero dispersion.
pub fn sharpe_ratio(daily: &[f64]) -> Option<f64> {
    let (mean, std) = mean_std(daily)?;
    if std == 0.0 || !std.is_finite() {
        return None;
    }
    Some(mean / std * TRADING_DAYS_PER_YEAR.sqrt())
}

fn month_key(d: NaiveDate) -> (i32, u32) {
    (d.year(), d.month())
}

/// Month-over-month change of month-end equity, over initial capital. Every
/// calendar month between the first and last point appears.
pub fn monthly_returns(curve: &[EquityPoint], initial_capital: f64) -> Vec<MonthlyReturn> {
    let (Some(first), Some(last)) = (curve.first(), curve.last()) else {
        return Vec::new();
    };
    let mut month = month_key(first.timestamp.date());
    let end = month_key(last.timestamp.date());
    let mut out = Vec::new();
    let mut prev = initial_capital;
    let mut idx = 0;
    loop {
        let mut month_end = prev;
        while idx < curve.len() && month_key(curve[idx].timestamp.date()) == month {
            month_end = curve[idx].equity;
            idx += 1;
        }
        out.push(MonthlyReturn {
            month: format!("{:04}-{:02}", month.0, month.1),
            value: (month_end - prev) / initial_capital,
        });
        prev = month_end;
        if month == end {
            break;
        }
        month = if month.1 == 12 { (month.0 + 1, 1) } else { (month.0, month.1 + 1) };
    }
    out
}

/// Sample standard deviation over mean.
pub fn coefficient_of_variation(values: &[f64]) -> Result<f64, BacktestError> {
    let (mean, std) = mean_std(values).ok_or(BacktestError::TooFewValues(values.len()))?;
    if mean == 0.0 {
        return Err(BacktestError::ZeroMean);
    }
    Ok(std / mean)
}

#[derive(Serialize)]
struct ReportJson<'a> {
    instrument: &'a str,
    round_trip_cost: f64,
    multiplier: f64,
    initial_capital: f64,
    final_equity: f64,
    cumulative_return: f64,
    map: Option<f64>,
    aar: Option<f64>,
    sharpe: Option<f64>,
    trade_count: usize,
    trades: &'a [TradeRecord],
}

/// Metrics and trade list as pretty JSON.
pub fn report_json(r: &BacktestReport) -> Result<String, serde_json::Error> {
    serde_json::to_string_pretty(&ReportJson {
        instrument: &r.cost.instrument,
        round_trip_cost: r.cost.round_trip_cost,
        multiplier: r.cost.multiplier,
        initial_capital: r.initial_capital,
        final_equity: r.final_equity,
        cumulative_return: r.cumulative_return,
        map: r.map,
        aar: r.aar,
        sharpe: r.sharpe,
        trade_count: r.trades.len(),
        trades: &r.trades,
    })
}

pub fn write_equity_csv<W: Write>(curve: &[EquityPoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "timestamp,equity")?;
    for p in curve {
        writeln!(out, "{},{}", p.timestamp.format(TIMESTAMP_FORMAT), p.equity)?;
    }
    Ok(())
}

pub fn write_monthly_csv<W: Write>(months: &[MonthlyReturn], mut out: W) -> std::io::Result<()> {
    writeln!(out, "month,return")?;
    for m in months {
        writeln!(out, "{},{}", m.month, m.value)?;
    }
    Ok(())
}

/// Accepts `up`/`flat`/`down` (any case) or `1`/`0`/`-1`.
pub fn parse_label(s: &str) -> Option<Label> {
    match s.trim().to_ascii_lowercase().as_str() {
        "up" | "1" | "+1" => Some(Label::Up),
        "flat" | "0" => Some(Label::Flat),
        "down" | "-1" => Some(Label::Down),
        _ => None,
    }
}

pub fn label_name(l: Label) -> &'static str {
    match l {
        Label::Up => "up",
        Label::Flat => "flat",
        Label::Down => "down",
    }
}

fn parse_timestamp(s: &str, line: u64) -> Result<NaiveDateTime, BacktestError> {
    NaiveDateTime::parse_from_str(s.trim(), TIMESTAMP_FORMAT).map_err(|e| BacktestError::Row {
        line,
        reason: format!("timestamp `{s}`: {e}"),
    })
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, BacktestError> {
    headers.iter().position(|h| h == name).ok_or_else(|| BacktestError::Row {
        line: 1,
        reason: format!("missing column `{name}`"),
    })
}

/// One row of a predictions file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionRow {
    pub timestamp: NaiveDateTime,
    pub prediction: Label,
    pub truth: Option<Label>,
}

/// Reads `timestamp,prediction[,truth,...]` (extra columns ignored; empty truth allowed).
pub fn read_predictions<R: Read>(reader: R) -> Result<Vec<PredictionRow>, BacktestError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let (ti, pi) = (column(&headers, "timestamp")?, column(&headers, "prediction")?);
    let truth_col = headers.iter().position(|h| h == "truth");
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let label = |i: usize| {
            parse_label(&rec[i]).ok_or_else(|| BacktestError::Row {
                line,
                reason: format!("label `{}`", &rec[i]),
            })
        };
        let truth = match truth_col {
            Some(i) if !rec[i].trim().is_empty() => Some(label(i)?),
            _ => None,
        };
        out.push(PredictionRow {
            timestamp: parse_timestamp(&rec[ti], line)?,
            prediction: label(pi)?,
            truth,
        });
    }
    Ok(out)
}

/// Reads `timestamp,close`.
pub fn read_prices<R: Read>(reader: R) -> Result<Vec<(NaiveDateTime, f64)>, BacktestError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let (ti, ci) = (column(&headers, "timestamp")?, column(&headers, "close")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let price: f64 = rec[ci].trim().parse().map_err(|_| BacktestError::Row {
            line,
            reason: format!("close `{}` is not a number", &rec[ci]),
        })?;
        out.push((parse_timestamp(&rec[ti], line)?, price));
    }
    Ok(out)
}

/// Pairs predictions with prices row by row, failing at the first timestamp that differs.
pub fn align(predictions: &[PredictionRow], prices: &[(NaiveDateTime, f64)]) -> Result<Vec<Signal>, BacktestError> {
    for (p, (t, _)) in predictions.iter().zip(prices) {
        if p.timestamp != *t {
            return Err(BacktestError::Misaligned {
                timestamp: p.timestamp.format(TIMESTAMP_FORMAT).to_string(),
                reason: format!("price row is stamped {}", t.format(TIMESTAMP_FORMAT)),
            });
        }
    }
    if predictions.len() != prices.len() {
        let n = predictions.len().min(prices.len());
        let ts = predictions
            .get(n)
            .map(|p| p.timestamp)
            .or_else(|| prices.get(n).map(|p| p.0))
            .expect("longer side has a row");
        return Err(BacktestError::Misaligned {
            timestamp: ts.format(TIMESTAMP_FORMAT).to_string(),
            reason: format!("{} predictions but {} prices", predictions.len(), prices.len()),
        });
    }
    Ok(predictions
        .iter()
        .zip(prices)
        .map(|(p, (t, price))| Signal {
            timestamp: *t,
            price: *price,
            prediction: p.prediction,
        })
        .collect())
}

/// Aligns, simulates and scores MAP over rows that carry a truth label.
pub fn run_backtest(
    predictions: &[PredictionRow],
    prices: &[(NaiveDateTime, f64)],
    cost: &CostModel,
    initial_capital: f64,
) -> Result<BacktestReport, BacktestError> {
    let signals = align(predictions, prices)?;
    let mut report = simulate(&signals, cost, initial_capital)?;
    let (p, t): (Vec<Label>, Vec<Label>) = predictions
        .iter()
        .filter_map(|r| r.truth.map(|t| (r.prediction, t)))
        .unzip();
    report.map = mean_average_precision(&p, &t).ok();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ts(day: u32, minute: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2017, 3, day)
            .unwrap()
            .and_hms_opt(minute / 60, minute % 60, 0)
            .unwrap()
    }

    fn signals(labels: &[Label], prices: &[f64]) -> Vec<Signal> {
        labels
            .iter()
            .zip(prices)
            .enumerate()
            .map(|(i, (l, p))| Signal {
                timestamp: ts(1 + (i / 30) as u32, 300 + 30 * (i % 30) as u32),
                price: *p,
                prediction: *l,
            })
            .collect()
    }

    #[test]
    fn trade_pnl_hand_values() {
        let cl = CostModel::crude_oil();
        assert_eq!(trade_pnl(Direction::Long, 100.0, 102.0, &cl).unwrap(), 1914.5);
        assert_eq!(trade_pnl(Direction::Short, 100.0, 102.0, &cl).unwrap(), -2085.5);
        assert_eq!(trade_pnl(Direction::Long, 100.0, 100.0, &cl).unwrap(), -85.5);
        assert!(trade_pnl(Direction::Long, 0.0, 100.0, &cl).is_err());
    }

    #[test]
    fn worked_example() {
        use Label::*;
        let s = signals(&[Up, Flat, Down, Flat], &[100.0, 101.0, 102.0, 101.0]);
        let r = simulate(&s, &CostModel::crude_oil(), INITIAL_CAPITAL).unwrap();
        assert_eq!(r.trades.len(), 2);
        assert_eq!(r.trades[0].pnl, 1914.5);
        assert_eq!(r.trades[1].pnl, 914.5);
        assert_eq!(r.final_equity, 102829.0);
        assert_eq!(r.equity_curve[0].equity, INITIAL_CAPITAL);
        assert_eq!(r.equity_curve.last().unwrap().equity, 102829.0);
        assert_eq!(r.equity_curve[1].equity, INITIAL_CAPITAL + 1000.0);
    }

    #[test]
    fn all_flat_means_no_trades() {
        let s = signals(&[Label::Flat; 5], &[10.0, 11.0, 9.0, 12.0, 10.0]);
        let r = simulate(&s, &CostModel::crude_oil(), INITIAL_CAPITAL).unwrap();
        assert!(r.trades.is_empty());
        assert_eq!(r.final_equity, INITIAL_CAPITAL);
        assert_eq!(r.sharpe, None);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(simulate(&[], &CostModel::crude_oil(), 1.0), Err(BacktestError::Empty)));
        let mut s = signals(&[Label::Up, Label::Down], &[1.0, 2.0]);
        s[1].timestamp = s[0].timestamp;
        assert!(matches!(
            simulate(&s, &CostModel::crude_oil(), 1.0),
            Err(BacktestError::Misaligned { .. })
        ));
        assert!(CostModel::new("X", -1.0, 1.0).is_err());
        assert!(CostModel::new("X", 1.0, 0.0).is_err());
    }

    #[test]
    fn map_values() {
        use Label::*;
        let truth = [Up, Flat, Down, Up, Flat, Down];
        assert_eq!(mean_average_precision(&truth, &truth).unwrap(), 1.0);
        let flat = [Flat; 6];
        assert!((mean_average_precision(&flat, &truth).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        assert!(mean_average_precision(&flat[..2], &truth).is_err());
    }

    #[test]
    fn annual_return_values() {
        assert!((annual_return(100_000.0, 110_000.0, 365.25).unwrap() - 0.10).abs() < 1e-12);
        assert!((annual_return(100_000.0, 110_000.0, 365.25 / 2.0).unwrap() - 0.20).abs() < 1e-12);
        assert_eq!(annual_return(100_000.0, 100_000.0, 30.0).unwrap(), 0.0);
        assert!(annual_return(1.0, 2.0, 0.0).is_err());
    }

    #[test]
    fn sharpe_values() {
        let alternating: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 0.02 } else { 0.0 }).collect();
        let (mean, std) = mean_std(&alternating).unwrap();
        assert!((mean - 0.01).abs() < 1e-15);
        assert!((std - 0.01005).abs() < 1e-5);
        assert!((sharpe_ratio(&alternating).unwrap() - 15.79).abs() < 0.01);
        assert_eq!(sharpe_ratio(&[0.01, -0.01, 0.02, -0.02]).unwrap(), 0.0);
        assert_eq!(sharpe_ratio(&[0.01; 5]), None);
        assert_eq!(sharpe_ratio(&[0.01]), None);
    }

    #[test]
    fn monthly_returns_telescope() {
        let point = |m: u32, d: u32, e: f64| EquityPoint {
            timestamp: NaiveDate::from_ymd_opt(2018, m, d).unwrap().and_hms_opt(12, 0, 0).unwrap(),
            equity: e,
        };
        let curve = vec![
            point(1, 5, 100_000.0),
            point(1, 20, 101_000.0),
            point(4, 2, 101_000.0),
            point(4, 9, 99_500.0),
        ];
        let m = monthly_returns(&curve, 100_000.0);
        let months: Vec<&str> = m.iter().map(|r| r.month.as_str()).collect();
        assert_eq!(months, ["2018-01", "2018-02", "2018-03", "2018-04"]);
        assert_eq!(m[0].value, 0.01);
        assert_eq!(m[1].value, 0.0);
        assert_eq!(m[2].value, 0.0);
        let total: f64 = m.iter().map(|r| r.value).sum();
        assert!((total - (99_500.0 - 100_000.0) / 100_000.0).abs() < 1e-15);
    }

    #[test]
    fn cv_values() {
        assert_eq!(coefficient_of_variation(&[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(coefficient_of_variation(&[1.0, 2.0, 3.0]).unwrap(), 0.5);
        assert!(matches!(coefficient_of_variation(&[1.0]), Err(BacktestError::TooFewValues(1))));
        assert!(matches!(coefficient_of_variation(&[-1.0, 1.0]), Err(BacktestError::ZeroMean)));
    }

    #[test]
    fn csv_round_trip_and_alignment() {
        let preds = "timestamp,prediction,truth\n2017-03-01 09:00,up,down\n2017-03-01 09:30,-1,\n";
        let prices = "timestamp,close\n2017-03-01 09:00,50.5\n2017-03-01 09:30,50.25\n";
        let p = read_predictions(preds.as_bytes()).unwrap();
        assert_eq!(p[1].prediction, Label::Down);
        assert_eq!(p[1].truth, None);
        let q = read_prices(prices.as_bytes()).unwrap();
        let r = run_backtest(&p, &q, &CostModel::crude_oil(), INITIAL_CAPITAL).unwrap();
        assert_eq!(r.trades.len(), 1);
        assert_eq!(r.map, Some(0.0));
        let shifted = prices.replace("09:30", "10:00");
        let q = read_prices(shifted.as_bytes()).unwrap();
        match align(&p, &q) {
            Err(BacktestError::Misaligned { timestamp, .. }) => assert_eq!(timestamp, "2017-03-01 09:30"),
            other => panic!("{other:?}"),
        }
    }

    fn brute_force_final_equity(s: &[Signal], cost: &CostModel) -> (f64, usize) {
        let mut pnl = Vec::new();
        let mut pos: Option<(Direction, f64)> = None;
        let n = s.len();
        for (i, sig) in s.iter().enumerate() {
            let want = match sig.prediction {
                Label::Up => Some(Direction::Long),
                Label::Down => Some(Direction::Short),
                Label::Flat => None,
            };
            if i + 1 == n {
                if let Some((d, p0)) = pos {
                    pnl.push(trade_pnl(d, p0, sig.price, cost).unwrap());
                }
                break;
            }
            match (pos, want) {
                (None, Some(w)) => pos = Some((w, sig.price)),
                (Some((d, p0)), Some(w)) if d != w => {
                    pnl.push(trade_pnl(d, p0, sig.price, cost).unwrap());
                    pos = Some((w, sig.price));
                }
                _ => {}
            }
        }
        (INITIAL_CAPITAL + pnl.iter().sum::<f64>(), pnl.len())
    }

    fn arb_run() -> impl Strategy<Value = (Vec<Label>, Vec<f64>)> {
        (2usize..60).prop_flat_map(|n| {
            (
                prop::collection::vec(prop::sample::select(Label::ALL.to_vec()), n),
                prop::collection::vec(20.0f64..120.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force((labels, prices) in arb_run()) {
            let s = signals(&labels, &prices);
            let cost = CostModel::crude_oil();
            let r = simulate(&s, &cost, INITIAL_CAPITAL).unwrap();
            let (oracle, count) = brute_force_final_equity(&s, &cost);
            prop_assert_eq!(r.final_equity.to_bits(), oracle.to_bits());
            prop_assert_eq!(r.trades.len(), count);
            let nonzero: Vec<i8> = labels[..labels.len() - 1].iter().map(|l| l.signal()).filter(|v| *v != 0).collect();
            let changes = nonzero.windows(2).filter(|w| w[0] != w[1]).count();
            prop_assert_eq!(r.trades.len(), if nonzero.is_empty() { 0 } else { changes + 1 });
            prop_assert!(r.trades.iter().all(|t| t.exit_time > t.entry_time));
        }

        #[test]
        fn flipping_signals_negates_gross_pnl((labels, prices) in arb_run()) {
            let cost = CostModel::crude_oil();
            let a = simulate(&signals(&labels, &prices), &cost, INITIAL_CAPITAL).unwrap();
            let flipped: Vec<Label> = labels.iter().map(|l| l.opposite()).collect();
            let b = simulate(&signals(&flipped, &prices), &cost, INITIAL_CAPITAL).unwrap();
            prop_assert_eq!(a.trades.len(), b.trades.len());
            for (x, y) in a.trades.iter().zip(&b.trades) {
                let gx = x.pnl + cost.round_trip_cost;
                let gy = y.pnl + cost.round_trip_cost;
                prop_assert!((gx + gy).abs() < 1e-6);
            }
        }

        #[test]
        fn higher_cost_lowers_equity((labels, prices) in arb_run(), extra in 0.01f64..500.0) {
            let s = signals(&labels, &prices);
            let cheap = simulate(&s, &CostModel::crude_oil(), INITIAL_CAPITAL).unwrap();
            let mut dear_cost = CostModel::crude_oil();
            dear_cost.round_trip_cost += extra;
            let dear = simulate(&s, &dear_cost, INITIAL_CAPITAL).unwrap();
            if cheap.trades.is_empty() {
                prop_assert_eq!(cheap.final_equity, dear.final_equity);
            } else {
                prop_assert!(dear.final_equity < cheap.final_equity);
            }
        }

        #[test]
        fn map_is_order_independent(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..40), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let to = |i: usize| Label::from_class_index(i).unwrap();
            let (p, t): (Vec<Label>, Vec<Label>) = pairs.iter().map(|(a, b)| (to(*a), to(*b))).unzip();
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (p2, t2): (Vec<Label>, Vec<Label>) = shuffled.iter().map(|(a, b)| (to(*a), to(*b))).unzip();
            let a = mean_average_precision(&p, &t).unwrap();
            let b = mean_average_precision(&p2, &t2).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn cv_scale_invariant(xs in prop::collection::vec(1.0f64..10.0, 2..10), c in 0.1f64..100.0) {
            let scaled: Vec<f64> = xs.iter().map(|x| x * c).collect();
            let a = coefficient_of_variation(&xs).unwrap();
            let b = coefficient_of_variation(&scaled).unwrap();
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
        }
    }
}
