use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::MarketDataError;

/// Inclusive calendar interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }

    pub fn overlaps(&self, other: &DateRange) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: usize,
    pub train: DateRange,
    pub validation: DateRange,
    pub test: DateRange,
    /// Index of the first training day in the date list the plan was built from.
    pub start_index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub sessions: Vec<Session>,
    pub shift: usize,
}

/// Window lengths, counted in trading days.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalkForward {
    pub train_days: usize,
    pub val_days: usize,
    pub test_days: usize,
    pub shift_days: usize,
}

impl Default for WalkForward {
    /// Three years of training, two weeks each of validation and test, one-week shift.
    fn default() -> Self {
        Self {
            train_days: 3 * 252,
            val_days: 10,
            test_days: 10,
            shift_days: 5,
        }
    }
}

/// Enumerates sessions over sorted, distinct trading `dates` until the data runs out.
pub fn plan_walk_forward(dates: &[NaiveDate], w: &WalkForward) -> Result<SplitPlan, MarketDataError> {
    if w.train_days == 0 || w.val_days == 0 || w.test_days == 0 || w.shift_days == 0 {
        return Err(MarketDataError::Split("window lengths and shift must be positive".into()));
    }
    if dates.windows(2).any(|p| p[0] >= p[1]) {
        return Err(MarketDataError::Split("dates must be strictly increasing".into()));
    }
    let span = w.train_days + w.val_days + w.test_days;
    if dates.len() < span {
        return Err(MarketDataError::InsufficientData {
            have: dates.len(),
            need: span,
        });
    }
    let range = |from: usize, len: usize| DateRange {
        start: dates[from],
        end: dates[from + len - 1],
    };
    let sessions = (0..)
        .map(|k| k * w.shift_days)
        .take_while(|s| s + span <= dates.len())
        .enumerate()
        .map(|(id, s)| Session {
            id,
            train: range(s, w.train_days),
            validation: range(s + w.train_days, w.val_days),
            test: range(s + w.train_days + w.val_days, w.test_days),
            start_index: s,
        })
        .collect();
    Ok(SplitPlan {
        sessions,
        shift: w.shift_days,
    })
}
