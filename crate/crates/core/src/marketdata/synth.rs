//! Seeded regime-switching market generator.
//!
//! A two-state Markov chain (bull / bear) sets the sign of a per-bar log drift;
//! Gaussian noise is added on top. Each bar is simulated as five one-minute
//! sub-steps so high and low come from an actual path. Volume follows an
//! intraday profile: low overnight, a ramp from 06:00, a plateau from 09:00 to
//! 14:00, then a fall back to the overnight level by 16:00.

use chrono::{Datelike, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::bars::{Bar, BAR_MINUTES};
use super::frames::{FRAME_MINUTES, STEPS};
use super::MarketDataError;

const SUBSTEPS: usize = 5;
/// Prices are rounded to six decimals.
const PRICE_SCALE: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Bull,
    Bear,
}

impl Regime {
    fn sign(self) -> f64 {
        match self {
            Regime::Bull => 1.0,
            Regime::Bear => -1.0,
        }
    }

    fn flip(self) -> Self {
        match self {
            Regime::Bull => Regime::Bear,
            Regime::Bear => Regime::Bull,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub days: usize,
    pub frames_per_day: usize,
    /// First bar of each session, minutes after midnight (multiple of 30).
    pub session_start_minute: u32,
    pub start_date: NaiveDate,
    pub start_price: f64,
    /// Probability that the regime carries over to the next bar.
    pub persistence: f64,
    /// Magnitude of the per-bar log drift.
    pub drift: f64,
    /// Per-bar log-return noise.
    pub volatility: f64,
    pub volume_overnight: f64,
    pub volume_plateau: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            days: 20,
            frames_per_day: 48,
            session_start_minute: 0,
            start_date: NaiveDate::from_ymd_opt(2010, 1, 4).expect("valid date"),
            start_price: 100.0,
            persistence: 0.97,
            drift: 0.0005,
            volatility: 0.001,
            volume_overnight: 100.0,
            volume_plateau: 1000.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), MarketDataError> {
        let bad = |m: &str| Err(MarketDataError::Synth(m.to_string()));
        if !(self.persistence > 0.0 && self.persistence < 1.0) {
            return bad("persistence must lie in (0, 1)");
        }
        if !(self.volatility >= 0.0) || !(self.drift >= 0.0) {
            return bad("drift and volatility must be nonnegative");
        }
        if self.days == 0 || self.frames_per_day == 0 {
            return bad("days and frames_per_day must be positive");
        }
        if self.session_start_minute % FRAME_MINUTES != 0 {
            return bad("session_start_minute must be a multiple of 30");
        }
        if self.session_start_minute + self.frames_per_day as u32 * FRAME_MINUTES > 24 * 60 {
            return bad("session runs past midnight");
        }
        if !(self.start_price > 0.0) || !(self.volume_overnight >= 0.0) || !(self.volume_plateau >= 0.0) {
            return bad("start price must be positive and volume levels nonnegative");
        }
        Ok(())
    }

    pub fn bars_per_day(&self) -> usize {
        self.frames_per_day * STEPS
    }

    /// Expected volume at a minute of the day.
    pub fn volume_profile(&self, minute: u32) -> f64 {
        let (lo, hi) = (self.volume_overnight, self.volume_plateau);
        let m = minute as f64;
        match minute {
            m_ if m_ < 6 * 60 => lo,
            m_ if m_ < 9 * 60 => lo + (hi - lo) * (m - 360.0) / 180.0,
            m_ if m_ < 14 * 60 => hi,
            m_ if m_ < 16 * 60 => hi - (hi - lo) * (m - 840.0) / 120.0,
            _ => lo,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticMarket {
    pub bars: Vec<Bar>,
    /// Regime in force during each bar.
    pub regimes: Vec<Regime>,
}

impl SyntheticMarket {
    /// Regime at the last bar of every frame, in frame order.
    pub fn frame_regimes(&self) -> Vec<Regime> {
        self.regimes.iter().skip(STEPS - 1).step_by(STEPS).copied().collect()
    }
}

fn quantize(p: f64) -> f64 {
    (p * PRICE_SCALE).round() / PRICE_SCALE
}

fn business_days(start: NaiveDate) -> impl Iterator<Item = NaiveDate> {
    start.iter_days().filter(|d| !matches!(d.weekday(), Weekday::Sat | Weekday::Sun))
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Bar>, MarketDataError> {
    Ok(generate_market(cfg)?.bars)
}

pub fn generate_market(cfg: &SynthConfig) -> Result<SyntheticMarket, MarketDataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut regime = if rng.random::<bool>() { Regime::Bull } else { Regime::Bear };
    let mut price = quantize(cfg.start_price);
    let n = cfg.days * cfg.bars_per_day();
    let mut bars = Vec::with_capacity(n);
    let mut regimes = Vec::with_capacity(n);
    let sub_drift = cfg.drift / SUBSTEPS as f64;
    let sub_vol = cfg.volatility / (SUBSTEPS as f64).sqrt();
    for date in business_days(cfg.start_date).take(cfg.days) {
        for k in 0..cfg.bars_per_day() {
            if rng.random::<f64>() >= cfg.persistence {
                regime = regime.flip();
            }
            let minute = cfg.session_start_minute + k as u32 * BAR_MINUTES;
            let open = price;
            let (mut high, mut low, mut p) = (open, open, open);
            for _ in 0..SUBSTEPS {
                let z: f64 = StandardNormal.sample(&mut rng);
                p *= (regime.sign() * sub_drift + sub_vol * z).exp();
                high = high.max(p);
                low = low.min(p);
            }
            let close = quantize(p);
            let noise: f64 = StandardNormal.sample(&mut rng);
            let volume = (cfg.volume_profile(minute) * (0.25 * noise).exp()).round().max(0.0) as u64;
            bars.push(Bar {
                date,
                minute,
                open,
                high: quantize(high).max(close),
                low: quantize(low).min(close),
                close,
                volume,
            });
            regimes.push(regime);
            price = close;
        }
    }
    Ok(SyntheticMarket { bars, regimes })
}
