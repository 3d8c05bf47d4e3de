use std::collections::BTreeMap;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::bars::{Bar, BAR_MINUTES};
use super::labels::Label;
use super::MarketDataError;

/// Rows of a frame: Open, High, Low, Close, Volume.
pub const ATTRIBUTES: usize = 5;
/// Columns of a frame: six consecutive 5-minute bars.
pub const STEPS: usize = 6;
pub const FRAME_MINUTES: u32 = BAR_MINUTES * STEPS as u32;
pub const STD_FLOOR: f64 = 1e-8;

/// A 30-minute block laid out attributes × time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub start: NaiveDateTime,
    pub values: [[f64; STEPS]; ATTRIBUTES],
    /// Close of the frame's last bar, never normalized.
    pub close_raw: f64,
}

impl Frame {
    fn from_bars(bars: &[Bar]) -> Self {
        let mut values = [[0.0; STEPS]; ATTRIBUTES];
        for (t, b) in bars.iter().enumerate() {
            values[0][t] = b.open;
            values[1][t] = b.high;
            values[2][t] = b.low;
            values[3][t] = b.close;
            values[4][t] = b.volume as f64;
        }
        Self {
            start: bars[0].timestamp(),
            values,
            close_raw: bars[STEPS - 1].close,
        }
    }

    /// Row-major `[ATTRIBUTES * STEPS]` view.
    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradingDay {
    pub date: NaiveDate,
    pub frames: Vec<Frame>,
    /// One entry per frame; `None` when no forward return exists.
    pub labels: Vec<Option<Label>>,
}

/// Groups bars into 30-minute frames (clock-aligned slots with all six bars
/// present) and keeps days with at least `frames_per_day` frames, truncated
/// to exactly that many.
pub fn build_frames(bars: &[Bar], frames_per_day: usize) -> Vec<TradingDay> {
    let mut by_day: BTreeMap<NaiveDate, Vec<&Bar>> = BTreeMap::new();
    for b in bars {
        by_day.entry(b.date).or_default().push(b);
    }
    let mut days = Vec::new();
    for (date, day_bars) in by_day {
        let mut slots: BTreeMap<u32, Vec<Bar>> = BTreeMap::new();
        for b in day_bars {
            slots.entry(b.minute / FRAME_MINUTES).or_default().push(b.clone());
        }
        let frames: Vec<Frame> = slots
            .into_iter()
            .filter(|(slot, group)| {
                group.len() == STEPS
                    && group
                        .iter()
                        .enumerate()
                        .all(|(k, b)| b.minute == slot * FRAME_MINUTES + k as u32 * BAR_MINUTES)
            })
            .map(|(_, group)| Frame::from_bars(&group))
            .collect();
        if frames.len() < frames_per_day {
            log::warn!("dropping {date}: {} complete frames, need {frames_per_day}", frames.len());
            continue;
        }
        if frames.len() > frames_per_day {
            log::warn!("{date}: keeping first {frames_per_day} of {} frames", frames.len());
        }
        let frames: Vec<Frame> = frames.into_iter().take(frames_per_day).collect();
        days.push(TradingDay {
            date,
            labels: vec![None; frames.len()],
            frames,
        });
    }
    days
}

/// Per-attribute z-score statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; ATTRIBUTES],
    pub std: [f64; ATTRIBUTES],
}

pub fn fit_normalizer(train_days: &[TradingDay]) -> Result<NormStats, MarketDataError> {
    let count = train_days.iter().map(|d| d.frames.len()).sum::<usize>() * STEPS;
    if count == 0 {
        return Err(MarketDataError::EmptyTrainingSplit);
    }
    let n = count as f64;
    let mut mean = [0.0; ATTRIBUTES];
    let frames = || train_days.iter().flat_map(|d| d.frames.iter());
    for f in frames() {
        for (a, row) in f.values.iter().enumerate() {
            mean[a] += row.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; ATTRIBUTES];
    for f in frames() {
        for (a, row) in f.values.iter().enumerate() {
            var[a] += row.iter().map(|v| (v - mean[a]) * (v - mean[a])).sum::<f64>();
        }
    }
    let std = var.map(|v| (v / n).sqrt().max(STD_FLOOR));
    Ok(NormStats { mean, std })
}

pub fn apply_normalizer(days: &[TradingDay], stats: &NormStats) -> Vec<TradingDay> {
    days.iter()
        .map(|d| {
            let mut d = d.clone();
            for f in &mut d.frames {
                for (a, row) in f.values.iter_mut().enumerate() {
                    for v in row.iter_mut() {
                        *v = (*v - stats.mean[a]) / stats.std[a];
                    }
                }
            }
            d
        })
        .collect()
}
