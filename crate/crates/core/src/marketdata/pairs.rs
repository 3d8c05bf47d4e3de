use serde::{Deserialize, Serialize};

use super::frames::{Frame, TradingDay};
use super::labels::Label;
use super::MarketDataError;

pub const DEFAULT_MAX_GAP_DAYS: i64 = 4;

/// Frames and labels of a day in reverse time order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReversedDay {
    pub frames: Vec<Frame>,
    pub labels: Vec<Option<Label>>,
}

impl ReversedDay {
    pub fn of(day: &TradingDay) -> Self {
        Self {
            frames: day.frames.iter().rev().cloned().collect(),
            labels: day.labels.iter().rev().copied().collect(),
        }
    }

    /// Reverses back into a day dated `date`.
    pub fn unreverse(&self, date: chrono::NaiveDate) -> TradingDay {
        TradingDay {
            date,
            frames: self.frames.iter().rev().cloned().collect(),
            labels: self.labels.iter().rev().copied().collect(),
        }
    }
}

/// Two consecutive trading days: `day_a` feeds the encoder, `day_b` the decoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayPair {
    pub day_a: TradingDay,
    pub day_b: TradingDay,
    pub day_b_reversed: ReversedDay,
}

impl DayPair {
    pub fn new(day_a: TradingDay, day_b: TradingDay) -> Self {
        let day_b_reversed = ReversedDay::of(&day_b);
        Self {
            day_a,
            day_b,
            day_b_reversed,
        }
    }
}

/// Overlapping pairs `(d1, d2), (d2, d3), …`, skipping any pair whose calendar
/// gap exceeds `max_gap_days`.
pub fn make_day_pairs(days: &[TradingDay], max_gap_days: i64) -> Result<Vec<DayPair>, MarketDataError> {
    if days.len() < 2 {
        return Err(MarketDataError::TooFewDays(days.len()));
    }
    Ok(days
        .windows(2)
        .filter(|w| {
            let gap = (w[1].date - w[0].date).num_days();
            if gap > max_gap_days {
                log::info!("no pair across {} -> {} ({gap} days)", w[0].date, w[1].date);
            }
            gap <= max_gap_days
        })
        .map(|w| DayPair::new(w[0].clone(), w[1].clone()))
        .collect())
}
