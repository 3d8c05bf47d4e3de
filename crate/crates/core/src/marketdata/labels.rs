use serde::{Deserialize, Serialize};

use super::frames::TradingDay;
use super::MarketDataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Up,
    Flat,
    Down,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Up, Label::Flat, Label::Down];

    /// Index into the classifier output.
    pub fn class_index(self) -> usize {
        match self {
            Label::Up => 0,
            Label::Flat => 1,
            Label::Down => 2,
        }
    }

    pub fn from_class_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    /// `1`, `0` or `-1`.
    pub fn signal(self) -> i8 {
        match self {
            Label::Up => 1,
            Label::Flat => 0,
            Label::Down => -1,
        }
    }

    pub fn from_signal(s: i8) -> Option<Label> {
        match s {
            1 => Some(Label::Up),
            0 => Some(Label::Flat),
            -1 => Some(Label::Down),
            _ => None,
        }
    }

    pub fn opposite(self) -> Label {
        match self {
            Label::Up => Label::Down,
            Label::Flat => Label::Flat,
            Label::Down => Label::Up,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelThresholds {
    pub lambda: f64,
    pub mu_c: f64,
    pub b_up: f64,
    pub b_down: f64,
}

impl LabelThresholds {
    pub fn new(mu_c: f64, lambda: f64) -> Result<Self, MarketDataError> {
        if !(mu_c > 0.0) || !(lambda >= 0.0) || lambda >= mu_c {
            return Err(MarketDataError::Thresholds { mu_c, lambda });
        }
        Ok(Self {
            lambda,
            mu_c,
            b_up: ((mu_c + lambda) / mu_c).ln(),
            b_down: ((mu_c - lambda) / mu_c).ln(),
        })
    }

    pub fn classify(&self, log_return: f64) -> Label {
        if log_return > self.b_up {
            Label::Up
        } else if log_return < self.b_down {
            Label::Down
        } else {
            Label::Flat
        }
    }
}

fn log_return(from: f64, to: f64) -> Result<f64, MarketDataError> {
    if !(from > 0.0) || !(to > 0.0) {
        return Err(MarketDataError::NonPositiveClose(from.min(to)));
    }
    Ok((to / from).ln())
}

/// Log-returns between consecutive frames of `days`, in order.
pub fn frame_log_returns(days: &[TradingDay]) -> Result<Vec<f64>, MarketDataError> {
    let closes: Vec<f64> = days.iter().flat_map(|d| d.frames.iter().map(|f| f.close_raw)).collect();
    closes.windows(2).map(|w| log_return(w[0], w[1])).collect()
}

/// Share of returns falling in the Flat band.
pub fn flat_share(returns: &[f64], t: &LabelThresholds) -> f64 {
    if returns.is_empty() {
        return 0.0;
    }
    returns.iter().filter(|r| t.classify(**r) == Label::Flat).count() as f64 / returns.len() as f64
}

pub const FLAT_TARGET: f64 = 1.0 / 3.0;
pub const FLAT_TOLERANCE: f64 = 0.02;

/// Picks lambda by bisection so roughly a third of the training returns are Flat.
pub fn calibrate_lambda(train_days: &[TradingDay], min_transitions: usize) -> Result<LabelThresholds, MarketDataError> {
    let returns = frame_log_returns(train_days)?;
    if returns.len() < min_transitions {
        return Err(MarketDataError::TooFewTransitions {
            have: returns.len(),
            need: min_transitions,
        });
    }
    if returns.is_empty() || returns.iter().all(|r| *r == returns[0]) {
        return Err(MarketDataError::DegeneratePrices);
    }
    let closes: Vec<f64> = train_days.iter().flat_map(|d| d.frames.iter().map(|f| f.close_raw)).collect();
    let mu_c = closes.iter().sum::<f64>() / closes.len() as f64;

    let (mut lo, mut hi) = (0.0, mu_c * (1.0 - 1e-9));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if flat_share(&returns, &LabelThresholds::new(mu_c, mid)?) < FLAT_TARGET {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = LabelThresholds::new(mu_c, hi)?;
    let share = flat_share(&returns, &t);
    if (share - FLAT_TARGET).abs() > FLAT_TOLERANCE {
        log::warn!("flat share {share:.4} misses target {FLAT_TARGET:.4} (tied returns)");
    }
    Ok(t)
}

/// Labels every frame by the log-return to the next frame in `days`; the last
/// frame gets no label.
pub fn label(days: &[TradingDay], thresholds: &LabelThresholds) -> Result<Vec<TradingDay>, MarketDataError> {
    let returns = frame_log_returns(days)?;
    let mut out = days.to_vec();
    let mut k = 0;
    for d in &mut out {
        for slot in d.labels.iter_mut() {
            *slot = returns.get(k).map(|r| thresholds.classify(*r));
            k += 1;
        }
    }
    Ok(out)
}

/// Class shares (Up, Flat, Down) over labeled frames.
pub fn class_shares(days: &[TradingDay]) -> [f64; 3] {
    let mut counts = [0usize; 3];
    for l in days.iter().flat_map(|d| d.labels.iter().flatten()) {
        counts[l.class_index()] += 1;
    }
    let total = counts.iter().sum::<usize>().max(1) as f64;
    counts.map(|c| c as f64 / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marketdata::frames::{build_frames, Frame};
    use chrono::NaiveDate;

    fn days_from_closes(closes: &[f64]) -> Vec<TradingDay> {
        let date = NaiveDate::from_ymd_opt(2020, 1, 6).unwrap();
        let frames: Vec<Frame> = closes
            .iter()
            .enumerate()
            .map(|(i, c)| Frame {
                start: date.and_hms_opt(0, 0, 0).unwrap() + chrono::Duration::minutes(30 * i as i64),
                values: [[*c; 6]; 5],
                close_raw: *c,
            })
            .collect();
        vec![TradingDay {
            date,
            labels: vec![None; frames.len()],
            frames,
        }]
    }

    #[test]
    fn formula_examples() {
        let t = LabelThresholds::new(100.0, 1.0).unwrap();
        assert!((t.b_up - 0.00995033).abs() < 1e-8);
        assert!((t.b_down - (-0.01005034)).abs() < 1e-8);
        let days = label(&days_from_closes(&[100.0, 102.0, 102.0, 98.9 * 1.02]), &t).unwrap();
        assert_eq!(days[0].labels, vec![Some(Label::Up), Some(Label::Flat), Some(Label::Down), None]);
        assert!(((98.9f64 / 100.0).ln() - (-0.01106)).abs() < 1e-5);
        assert_eq!(t.classify((98.9f64 / 100.0).ln()), Label::Down);
    }

    #[test]
    fn zero_and_infinite_bands() {
        let returns = [0.01, -0.02, 0.003, -0.004];
        assert_eq!(flat_share(&returns, &LabelThresholds::new(50.0, 0.0).unwrap()), 0.0);
        assert_eq!(flat_share(&returns, &LabelThresholds::new(50.0, 49.999).unwrap()), 1.0);
    }

    #[test]
    fn nonpositive_close_is_rejected() {
        let t = LabelThresholds::new(100.0, 1.0).unwrap();
        assert!(matches!(
            label(&days_from_closes(&[100.0, 0.0]), &t),
            Err(MarketDataError::NonPositiveClose(_))
        ));
    }

    #[test]
    fn degenerate_series_is_rejected() {
        let days = days_from_closes(&vec![100.0; 50]);
        assert!(matches!(calibrate_lambda(&days, 10), Err(MarketDataError::DegeneratePrices)));
        assert!(matches!(
            calibrate_lambda(&days, 1000),
            Err(MarketDataError::TooFewTransitions { .. })
        ));
    }

    #[test]
    fn calibration_balances_symmetric_returns() {
        // Empirical-quantile oracle: for a symmetric random walk, the band
        // that holds one third of |r| gives roughly equal Up/Down shares.
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.002).unwrap();
        let mut p = 100.0f64;
        let closes: Vec<f64> = (0..3000)
            .map(|_| {
                p *= f64::exp(noise.sample(&mut rng));
                p
            })
            .collect();
        let days = days_from_closes(&closes);
        let t = calibrate_lambda(&days, 1000).unwrap();
        let mut abs: Vec<f64> = frame_log_returns(&days).unwrap().iter().map(|r| r.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let q = abs[abs.len() / 3];
        assert!((t.b_up - q).abs() < 0.2 * q, "b_up {} vs quantile {q}", t.b_up);
        let shares = class_shares(&label(&days, &t).unwrap());
        for s in shares {
            assert!((s - 1.0 / 3.0).abs() < 0.05, "{shares:?}");
        }
        assert!((shares[1] - FLAT_TARGET).abs() <= FLAT_TOLERANCE);
    }

    #[test]
    fn labels_cross_day_boundaries() {
        let cfg = crate::marketdata::SynthConfig {
            days: 3,
            frames_per_day: 4,
            session_start_minute: 600,
            ..Default::default()
        };
        let days = build_frames(&crate::marketdata::generate_synthetic(&cfg).unwrap(), 4);
        let t = LabelThresholds::new(100.0, 0.01).unwrap();
        let labeled = label(&days, &t).unwrap();
        assert!(labeled[0].labels[3].is_some());
        assert!(labeled[2].labels[3].is_none());
        assert_eq!(labeled.iter().flat_map(|d| d.labels.iter().flatten()).count(), 11);
    }
}
