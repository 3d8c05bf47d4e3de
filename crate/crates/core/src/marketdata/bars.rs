use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime, NaiveTime};
use serde::{Deserialize, Serialize};

use super::MarketDataError;

pub const CSV_HEADER: [&str; 7] = ["date", "time", "open", "high", "low", "close", "volume"];
pub const BAR_MINUTES: u32 = 5;

/// One 5-minute OHLCV record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    pub date: NaiveDate,
    /// Minutes after midnight, a multiple of 5.
    pub minute: u32,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: u64,
}

impl Bar {
    pub fn timestamp(&self) -> NaiveDateTime {
        let t = NaiveTime::from_hms_opt(self.minute / 60, self.minute % 60, 0).expect("minute of day");
        self.date.and_time(t)
    }

    pub fn is_consistent(&self) -> bool {
        let lo = self.open.min(self.close);
        let hi = self.open.max(self.close);
        self.low <= lo && hi <= self.high && [self.open, self.high, self.low, self.close].iter().all(|p| p.is_finite())
    }
}

/// A hole inside one trading day.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Gap {
    pub after: NaiveDateTime,
    pub missing_bars: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BarSeries {
    pub bars: Vec<Bar>,
    pub gaps: Vec<Gap>,
}

pub fn parse_csv(path: &Path) -> Result<BarSeries, MarketDataError> {
    let file = File::open(path).map_err(|source| MarketDataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csv_reader(file)
}

fn parse_time(s: &str) -> Option<u32> {
    let (h, m) = s.split_once(':')?;
    if h.len() != 2 || m.len() != 2 {
        return None;
    }
    let h: u32 = h.parse().ok()?;
    let m: u32 = m.parse().ok()?;
    (h < 24 && m < 60).then_some(h * 60 + m)
}

/// Parses the `date,time,open,high,low,close,volume` schema (LF or CRLF).
pub fn parse_csv_reader<R: Read>(reader: R) -> Result<BarSeries, MarketDataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| MarketDataError::Header(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(MarketDataError::Header(format!(
            "expected `{}`, found `{}`",
            CSV_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut bars: Vec<Bar> = Vec::new();
    let mut gaps = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| MarketDataError::Row {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |reason: String| MarketDataError::Row { line, reason };
        if rec.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", rec.len())));
        }
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d").map_err(|e| bad(format!("date `{}`: {e}", &rec[0])))?;
        let minute = parse_time(&rec[1]).ok_or_else(|| bad(format!("time `{}` is not HH:MM", &rec[1])))?;
        if minute % BAR_MINUTES != 0 {
            return Err(bad(format!("time `{}` is not 5-minute aligned", &rec[1])));
        }
        let price = |i: usize| -> Result<f64, MarketDataError> {
            let v: f64 = rec[i].trim().parse().map_err(|_| bad(format!("{} `{}` is not a number", CSV_HEADER[i], &rec[i])))?;
            if !v.is_finite() {
                return Err(bad(format!("{} is not finite", CSV_HEADER[i])));
            }
            Ok(v)
        };
        let volume: u64 = rec[6].trim().parse().map_err(|_| bad(format!("volume `{}` is not a nonnegative integer", &rec[6])))?;
        let bar = Bar {
            date,
            minute,
            open: price(2)?,
            high: price(3)?,
            low: price(4)?,
            close: price(5)?,
            volume,
        };
        if !bar.is_consistent() {
            return Err(MarketDataError::Ohlc { line });
        }
        if let Some(prev) = bars.last() {
            if bar.timestamp() <= prev.timestamp() {
                return Err(MarketDataError::NonMonotonic {
                    line,
                    timestamp: bar.timestamp().to_string(),
                });
            }
            if bar.date == prev.date && bar.minute - prev.minute > BAR_MINUTES {
                gaps.push(Gap {
                    after: prev.timestamp(),
                    missing_bars: (bar.minute - prev.minute) / BAR_MINUTES - 1,
                });
            }
        }
        bars.push(bar);
    }
    Ok(BarSeries { bars, gaps })
}

/// Writes bars in the canonical schema. Prices use the shortest decimal
/// that round-trips, so parsing the output reproduces the bars exactly.
pub fn write_csv<W: Write>(bars: &[Bar], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{}", CSV_HEADER.join(","))?;
    for b in bars {
        writeln!(
            out,
            "{},{:02}:{:02},{},{},{},{},{}",
            b.date.format("%Y-%m-%d"),
            b.minute / 60,
            b.minute % 60,
            b.open,
            b.high,
            b.low,
            b.close,
            b.volume
        )?;
    }
    Ok(())
}
