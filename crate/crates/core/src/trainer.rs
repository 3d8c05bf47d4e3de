//! Adam training loop, walk-forward orchestration and repeated-seed runs.
//!
//! Every random draw comes from a ChaCha stream seeded by a hash of
//! `(seed, session, iteration, sample)`, and per-sample gradients are reduced
//! in batch order, so sequential and parallel execution give bit-identical
//! parameters.

use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backtest::{self, BacktestError, CostModel, PredictionRow, INITIAL_CAPITAL};
use crate::diffcore::Tape;
use crate::marketdata::{
    apply_normalizer, calibrate_lambda, fit_normalizer, label, make_day_pairs, DateRange, DayPair, Label,
    LabelThresholds, MarketDataError, NormStats, Session, SplitPlan, TradingDay, BAR_MINUTES, DEFAULT_MAX_GAP_DAYS,
    FRAME_MINUTES,
};
use crate::model::{forward_pass, save_checkpoint, Mode, Model, ModelConfig, ModelError, ModelKind, ParamStore};
use crate::objective::{
    beta_at, total_objective, write_log, AnnealSchedule, ObjectiveBreakdown, ObjectiveError, ObjectiveWeights,
    DEFAULT_ALPHA, DEFAULT_ANNEAL_ITERATIONS, DEFAULT_GAMMA,
};
use crate::par::{self, ExecMode};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("cannot sample a mini-batch from an empty pool")]
    EmptyPool,
    #[error("gradient for parameter {index} has {got} entries, expected {expected}")]
    GradShape { index: usize, expected: usize, got: usize },
    #[error(
        "non-finite loss at iteration {iteration}: ce_forward {}, ce_backward {}, kld {}, l2 {}, total {}",
        .breakdown.ce_forward, .breakdown.ce_backward, .breakdown.kld, .breakdown.l2, .breakdown.total
    )]
    NonFinite {
        iteration: usize,
        breakdown: ObjectiveBreakdown,
    },
    #[error("non-finite gradient at iteration {iteration} in parameter `{param}`")]
    NonFiniteGradient { iteration: usize, param: String },
    #[error("session {session} has no {split} day pairs")]
    EmptySplit { session: usize, split: &'static str },
    #[error("the walk-forward plan has no sessions")]
    EmptyPlan,
    #[error("need at least 2 seeds, got {0}")]
    TooFewSeeds(usize),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Data(#[from] MarketDataError),
    #[error(transparent)]
    Backtest(#[from] BacktestError),
}

impl TrainError {
    /// Whether the failure comes from the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, TrainError::NonFinite { .. } | TrainError::NonFiniteGradient { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = (0..params.len()).map(|i| vec![0.0; params.tensor(i).len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::GradShape {
            index: grads.len().min(state.m.len()),
            expected: params.len(),
            got: grads.len(),
        });
    }
    for (i, g) in grads.iter().enumerate() {
        let n = params.tensor(i).len();
        if g.len() != n || state.m[i].len() != n {
            return Err(TrainError::GradShape {
                index: i,
                expected: n,
                got: g.len(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..g.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
        }
        params
            .tensor_mut(i)
            .update(|j, p| p - cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps))
            .map_err(ModelError::from)?;
    }
    Ok(())
}

/// Uniform draws with replacement.
pub fn sample_minibatch<'a, T, R: Rng + ?Sized>(pool: &'a [T], batch: usize, rng: &mut R) -> Result<Vec<&'a T>, TrainError> {
    if pool.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    Ok((0..batch).map(|_| &pool[rng.random_range(0..pool.len())]).collect())
}

/// Mixes seed components into one stream seed (splitmix64 finalizer per part).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const BATCH_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub seed: u64,
    /// Resolved from the experiment's model section, not stored here.
    #[serde(skip)]
    pub model: ModelConfig,
    pub alpha: f64,
    pub gamma: f64,
    /// Iterations over which β ramps from 0 to 1.
    pub anneal_iterations: usize,
    pub adam: AdamConfig,
    pub validation_every: usize,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch: 16,
            seed: 0,
            model: ModelConfig::default(),
            alpha: DEFAULT_ALPHA,
            gamma: DEFAULT_GAMMA,
            anneal_iterations: DEFAULT_ANNEAL_ITERATIONS,
            adam: AdamConfig::default(),
            validation_every: 50,
            exec: ExecMode::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.iterations == 0 || self.batch == 0 {
            return Err(TrainError::Config("iterations and batch must be at least 1".into()));
        }
        if self.validation_every == 0 {
            return Err(TrainError::Config("validation_every must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0) || !(self.adam.eps > 0.0) {
            return Err(TrainError::Config("learning rate and eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(TrainError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.alpha >= 0.0) || !(self.gamma >= 0.0) {
            return Err(TrainError::Config("alpha and gamma must be nonnegative".into()));
        }
        AnnealSchedule::new(self.anneal_iterations)?;
        self.model.validate()?;
        Ok(())
    }

    fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            alpha: self.alpha,
            gamma: self.gamma,
        }
    }
}

/// The configuration of a named model, built on `base` for sizes.
pub fn assemble_baseline(kind: ModelKind, base: &ModelConfig) -> ModelConfig {
    kind.apply(base)
}

/// Forward-decoder cross-entropy and accuracy in evaluation mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub ce: f64,
    pub accuracy: f64,
    pub labeled: usize,
}

pub fn argmax_label(p: &[f64; 3]) -> Label {
    let mut best = 0;
    for i in 1..3 {
        if p[i] > p[best] {
            best = i;
        }
    }
    Label::from_class_index(best).expect("three classes")
}

/// Evaluation never touches parameters or optimizer state.
pub fn evaluate(model: &Model, pairs: &[DayPair], exec: ExecMode) -> Result<EvalStats, TrainError> {
    let per_pair = par::try_map(exec, pairs, |pair| model.predict(pair))?;
    let (mut ce, mut hits, mut n) = (0.0, 0usize, 0usize);
    for (pair, probs) in pairs.iter().zip(&per_pair) {
        for (p, l) in probs.iter().zip(&pair.day_b.labels) {
            if let Some(l) = l {
                ce -= p[l.class_index()].max(1e-12).ln();
                hits += usize::from(argmax_label(p) == *l);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Ok(EvalStats::default());
    }
    Ok(EvalStats {
        ce: ce / n as f64,
        accuracy: hits as f64 / n as f64,
        labeled: n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub iteration: usize,
    pub ce: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last iteration.
    pub last: Model,
    /// Parameters at the lowest validation cross-entropy (the last ones when
    /// there is no validation data).
    pub best: Model,
    pub best_iteration: usize,
    pub log: Vec<(usize, ObjectiveBreakdown)>,
    pub validation: Vec<ValidationPoint>,
}

fn sample_gradient(
    params: &ParamStore,
    cfg: &TrainConfig,
    pair: &DayPair,
    beta: f64,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, ObjectiveBreakdown), TrainError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = forward_pass(&mut tape, &bound, &cfg.model, pair, Mode::Train, &mut rng)?;
    let (loss, bd) = total_objective(
        &mut tape,
        &out,
        &pair.day_b.labels,
        &pair.day_b_reversed.labels,
        bound.vars(),
        beta,
        &cfg.weights(),
    )?;
    tape.backward(loss).map_err(ModelError::from)?;
    let grads = bound
        .vars()
        .iter()
        .enumerate()
        .map(|(i, v)| match tape.grad(*v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; params.tensor(i).len()],
        })
        .collect();
    Ok((grads, bd))
}

fn has_labels(pair: &DayPair) -> bool {
    pair.day_b.labels.iter().any(Option::is_some)
}

/// Runs `cfg.iterations` Adam steps on mini-batches of `train`, validating on
/// `validation` every `cfg.validation_every` iterations and after the last.
pub fn train(
    train_pairs: &[DayPair],
    validation: &[DayPair],
    cfg: &TrainConfig,
    session: usize,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let pool: Vec<DayPair> = train_pairs.iter().filter(|p| has_labels(p)).cloned().collect();
    let schedule = AnnealSchedule::new(cfg.anneal_iterations)?;
    let mut model = Model::new(cfg.model.clone(), derive_seed(&[cfg.seed, session as u64, INIT_STREAM]))?;
    let mut adam = AdamState::new(&model.params);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, session as u64, BATCH_STREAM]));
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut val_points = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for k in 0..cfg.iterations {
        let beta = beta_at(k, &schedule);
        let batch = sample_minibatch(&pool, cfg.batch, &mut batch_rng)?;
        let jobs: Vec<(u64, &DayPair)> = batch.into_iter().enumerate().map(|(j, p)| (j as u64, p)).collect();
        let params = &model.params;
        let results = par::try_map(cfg.exec, &jobs, |(j, pair)| {
            let seed = derive_seed(&[cfg.seed, session as u64, SAMPLE_STREAM, k as u64, *j]);
            sample_gradient(params, cfg, pair, beta, seed)
        })?;

        let n = results.len() as f64;
        let mut grads: Vec<Vec<f64>> = (0..params.len()).map(|i| vec![0.0; params.tensor(i).len()]).collect();
        let mut parts = Vec::with_capacity(results.len());
        for (g, bd) in results {
            for (acc, gi) in grads.iter_mut().zip(&g) {
                for (a, x) in acc.iter_mut().zip(gi) {
                    *a += x;
                }
            }
            parts.push(bd);
        }
        let bd = ObjectiveBreakdown::mean(&parts);
        if !bd.is_finite() {
            return Err(TrainError::NonFinite {
                iteration: k,
                breakdown: bd,
            });
        }
        for (i, g) in grads.iter_mut().enumerate() {
            g.iter_mut().for_each(|x| *x /= n);
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    iteration: k,
                    param: model.params.names()[i].clone(),
                });
            }
        }
        adam_step(&mut model.params, &grads, &mut adam, &cfg.adam)?;
        log.push((k, bd));

        let done = k + 1;
        if !validation.is_empty() && (done % cfg.validation_every == 0 || done == cfg.iterations) {
            let stats = evaluate(&model, validation, cfg.exec)?;
            log::debug!("session {session} iteration {done}: validation ce {:.5}", stats.ce);
            val_points.push(ValidationPoint {
                iteration: done,
                ce: stats.ce,
                accuracy: stats.accuracy,
            });
            if best.as_ref().is_none_or(|(ce, _, _)| stats.ce < *ce) {
                best = Some((stats.ce, done, model.params.clone()));
            }
        }
    }

    let (best_iteration, best_params) = match best {
        Some((_, it, p)) => (it, p),
        None => (cfg.iterations, model.params.clone()),
    };
    Ok(TrainOutcome {
        best: Model {
            config: cfg.model.clone(),
            params: best_params,
        },
        last: model,
        best_iteration,
        log,
        validation: val_points,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataOptions {
    pub max_gap_days: i64,
    /// Minimum labeled transitions in a training split for threshold calibration.
    pub min_transitions: usize,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self {
            max_gap_days: DEFAULT_MAX_GAP_DAYS,
            min_transitions: 30,
        }
    }
}

fn days_in(days: &[TradingDay], range: &DateRange) -> Vec<TradingDay> {
    days.iter().filter(|d| range.contains(d.date)).cloned().collect()
}

/// Normalizer and label thresholds, fitted on the session's training days only.
pub fn fit_session_preprocessing(
    days: &[TradingDay],
    session: &Session,
    opts: &DataOptions,
) -> Result<(NormStats, LabelThresholds), TrainError> {
    let train = days_in(days, &session.train);
    Ok((fit_normalizer(&train)?, calibrate_lambda(&train, opts.min_transitions)?))
}

/// Normalized, labeled day pairs of one session, split by the date of day B.
#[derive(Clone, Debug)]
pub struct SessionData {
    pub session: Session,
    pub stats: NormStats,
    pub thresholds: LabelThresholds,
    pub train: Vec<DayPair>,
    pub validation: Vec<DayPair>,
    pub test: Vec<DayPair>,
}

/// Each split is labeled on its own, so its last frame stays unlabeled and no
/// label looks across a split boundary. Day A of a pair may come from the
/// previous split; it is input only.
pub fn prepare_session(days: &[TradingDay], session: &Session, opts: &DataOptions) -> Result<SessionData, TrainError> {
    let (stats, thresholds) = fit_session_preprocessing(days, session, opts)?;
    let mut all = Vec::new();
    for range in [&session.train, &session.validation, &session.test] {
        let split = apply_normalizer(&days_in(days, range), &stats);
        all.extend(label(&split, &thresholds)?);
    }
    let pairs = make_day_pairs(&all, opts.max_gap_days)?;
    let pick = |r: &DateRange| -> Vec<DayPair> { pairs.iter().filter(|p| r.contains(p.day_b.date)).cloned().collect() };
    let data = SessionData {
        session: session.clone(),
        stats,
        thresholds,
        train: pick(&session.train),
        validation: pick(&session.validation),
        test: pick(&session.test),
    };
    for (split, v) in [("training", &data.train), ("test", &data.test)] {
        if v.is_empty() {
            return Err(TrainError::EmptySplit {
                session: session.id,
                split,
            });
        }
    }
    Ok(data)
}

/// One test-frame prediction, stamped with the time of the frame's last bar.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub timestamp: NaiveDateTime,
    pub session: usize,
    pub prediction: Label,
    pub truth: Option<Label>,
    pub close: f64,
    pub probs: [f64; 3],
}

fn frame_close_time(start: NaiveDateTime) -> NaiveDateTime {
    start + Duration::minutes((FRAME_MINUTES - BAR_MINUTES) as i64)
}

pub fn predict_pairs(model: &Model, pairs: &[DayPair], session: usize) -> Result<Vec<PredictionRecord>, TrainError> {
    let mut out = Vec::new();
    for pair in pairs {
        let probs = model.predict(pair)?;
        for ((p, f), l) in probs.iter().zip(&pair.day_b.frames).zip(&pair.day_b.labels) {
            out.push(PredictionRecord {
                timestamp: frame_close_time(f.start),
                session,
                prediction: argmax_label(p),
                truth: *l,
                close: f.close_raw,
                probs: *p,
            });
        }
    }
    Ok(out)
}

pub fn prediction_rows(preds: &[PredictionRecord]) -> Vec<PredictionRow> {
    preds
        .iter()
        .map(|p| PredictionRow {
            timestamp: p.timestamp,
            prediction: p.prediction,
            truth: p.truth,
        })
        .collect()
}

pub fn price_rows(preds: &[PredictionRecord]) -> Vec<(NaiveDateTime, f64)> {
    preds.iter().map(|p| (p.timestamp, p.close)).collect()
}

pub const PREDICTIONS_HEADER: &str = "timestamp,prediction,truth,session,p_up,p_flat,p_down";

/// One row per prediction; `truth` is empty for unlabeled frames.
pub fn write_predictions_csv<W: Write>(preds: &[PredictionRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{PREDICTIONS_HEADER}")?;
    for p in preds {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.timestamp.format(backtest::TIMESTAMP_FORMAT),
            backtest::label_name(p.prediction),
            p.truth.map(backtest::label_name).unwrap_or(""),
            p.session,
            p.probs[0],
            p.probs[1],
            p.probs[2]
        )?;
    }
    Ok(())
}

/// `timestamp,close` at each prediction's frame close.
pub fn write_prices_csv<W: Write>(preds: &[PredictionRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "timestamp,close")?;
    for p in preds {
        writeln!(out, "{},{}", p.timestamp.format(backtest::TIMESTAMP_FORMAT), p.close)?;
    }
    Ok(())
}

/// Share of labeled predictions that match their truth label.
pub fn accuracy(preds: &[PredictionRecord]) -> Option<f64> {
    let labeled: Vec<_> = preds.iter().filter_map(|p| p.truth.map(|t| p.prediction == t)).collect();
    if labeled.is_empty() {
        return None;
    }
    Some(labeled.iter().filter(|h| **h).count() as f64 / labeled.len() as f64)
}

/// Backtest costs and capital shared by every session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BacktestOptions {
    pub cost: CostModel,
    pub initial_capital: f64,
}

impl Default for BacktestOptions {
    fn default() -> Self {
        Self {
            cost: CostModel::crude_oil(),
            initial_capital: INITIAL_CAPITAL,
        }
    }
}

/// Summary of one trained session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub session: usize,
    pub map: Option<f64>,
    pub aar: Option<f64>,
    pub sharpe: Option<f64>,
    pub iterations: usize,
    /// Relative to the output directory.
    pub checkpoint: Option<String>,
    pub best_iteration: usize,
    pub final_validation_ce: Option<f64>,
    pub best_validation_ce: Option<f64>,
    pub test_accuracy: Option<f64>,
    #[serde(skip)]
    pub log: Vec<(usize, ObjectiveBreakdown)>,
}

#[derive(Clone, Debug)]
pub struct WalkForwardResult {
    pub records: Vec<RunRecord>,
    /// Chronological test predictions; where test windows overlap, the
    /// earliest session covering a date supplies it.
    pub predictions: Vec<PredictionRecord>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn run_name(seed: u64, session: usize) -> String {
    format!("seed-{seed}-session-{session:03}")
}

/// Trains one session and scores its test window; with `out`, writes
/// `logs/<run>.csv` and `checkpoints/<run>.json` beneath it.
pub fn train_session(
    data: &SessionData,
    cfg: &TrainConfig,
    bt: &BacktestOptions,
    out: Option<&Path>,
) -> Result<(RunRecord, Vec<PredictionRecord>), TrainError> {
    let id = data.session.id;
    let outcome = train(&data.train, &data.validation, cfg, id)?;
    let preds = predict_pairs(&outcome.best, &data.test, id)?;
    let report = backtest::run_backtest(
        &prediction_rows(&preds),
        &price_rows(&preds),
        &bt.cost,
        bt.initial_capital,
    )?;
    let mut checkpoint = None;
    if let Some(dir) = out {
        let name = run_name(cfg.seed, id);
        let logs = dir.join("logs");
        let ckpts = dir.join("checkpoints");
        for d in [&logs, &ckpts] {
            std::fs::create_dir_all(d).map_err(io_err(d))?;
        }
        let log_path = logs.join(format!("{name}.csv"));
        let file = std::fs::File::create(&log_path).map_err(io_err(&log_path))?;
        write_log(&outcome.log, std::io::BufWriter::new(file)).map_err(io_err(&log_path))?;
        let rel = PathBuf::from("checkpoints").join(format!("{name}.json"));
        save_checkpoint(&dir.join(&rel), &outcome.best.config, &outcome.best.params)?;
        checkpoint = Some(rel.to_string_lossy().replace('\\', "/"));
    }
    let record = RunRecord {
        seed: cfg.seed,
        session: id,
        map: report.map,
        aar: report.aar,
        sharpe: report.sharpe,
        iterations: cfg.iterations,
        checkpoint,
        best_iteration: outcome.best_iteration,
        final_validation_ce: outcome.validation.last().map(|v| v.ce),
        best_validation_ce: outcome.validation.iter().map(|v| v.ce).reduce(f64::min),
        test_accuracy: accuracy(&preds),
        log: outcome.log,
    };
    Ok((record, preds))
}

/// Trains every session of `plan` on `days` (raw frames, unnormalized and unlabeled).
pub fn run_walk_forward(
    days: &[TradingDay],
    plan: &SplitPlan,
    cfg: &TrainConfig,
    data_opts: &DataOptions,
    bt: &BacktestOptions,
    out: Option<&Path>,
) -> Result<WalkForwardResult, TrainError> {
    if plan.sessions.is_empty() {
        return Err(TrainError::EmptyPlan);
    }
    let results = par::try_map(cfg.exec, &plan.sessions, |s| {
        let data = prepare_session(days, s, data_opts)?;
        train_session(&data, cfg, bt, out)
    })?;
    let mut records = Vec::with_capacity(results.len());
    let mut predictions: Vec<PredictionRecord> = Vec::new();
    for (record, preds) in results {
        records.push(record);
        let covered_until = predictions.last().map(|p| p.timestamp);
        predictions.extend(preds.into_iter().filter(|p| covered_until.is_none_or(|t| p.timestamp > t)));
    }
    Ok(WalkForwardResult { records, predictions })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: f64,
    pub std: f64,
    /// `None` when the mean is zero.
    pub cv: Option<f64>,
}

impl MetricStats {
    /// `None` when any value is missing or fewer than two are given.
    pub fn of(values: &[Option<f64>]) -> Option<MetricStats> {
        let v: Vec<f64> = values.iter().copied().collect::<Option<Vec<f64>>>()?;
        let (mean, std) = backtest::mean_std(&v)?;
        Some(MetricStats {
            mean,
            std,
            cv: backtest::coefficient_of_variation(&v).ok(),
        })
    }
}

/// Whole-stream metrics for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub map: Option<f64>,
    pub aar: Option<f64>,
    pub sharpe: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub mean_final_validation_ce: Option<f64>,
    pub records: Vec<RunRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatReport {
    pub seeds: Vec<u64>,
    pub map: Option<MetricStats>,
    pub aar: Option<MetricStats>,
    pub sharpe: Option<MetricStats>,
    pub test_accuracy: Option<MetricStats>,
    pub runs: Vec<SeedSummary>,
}

/// Summarizes a walk-forward result by backtesting its whole prediction stream.
pub fn summarize_seed(seed: u64, wf: &WalkForwardResult, bt: &BacktestOptions) -> Result<SeedSummary, TrainError> {
    let report = backtest::run_backtest(
        &prediction_rows(&wf.predictions),
        &price_rows(&wf.predictions),
        &bt.cost,
        bt.initial_capital,
    )?;
    let ces: Vec<f64> = wf.records.iter().filter_map(|r| r.final_validation_ce).collect();
    Ok(SeedSummary {
        seed,
        map: report.map,
        aar: report.aar,
        sharpe: report.sharpe,
        test_accuracy: accuracy(&wf.predictions),
        mean_final_validation_ce: (!ces.is_empty()).then(|| ces.iter().sum::<f64>() / ces.len() as f64),
        records: wf.records.clone(),
    })
}

/// One walk-forward run per seed (seeds fan out under `cfg.exec`, each run
/// sequential inside), then mean, sample std and CV per metric.
pub fn repeat_runs(
    days: &[TradingDay],
    plan: &SplitPlan,
    cfg: &TrainConfig,
    data_opts: &DataOptions,
    bt: &BacktestOptions,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<RepeatReport, TrainError> {
    if seeds.len() < 2 {
        return Err(TrainError::TooFewSeeds(seeds.len()));
    }
    let runs = par::try_map(cfg.exec, seeds, |&seed| {
        let child = TrainConfig {
            seed,
            exec: ExecMode::Sequential,
            ..cfg.clone()
        };
        let wf = run_walk_forward(days, plan, &child, data_opts, bt, out)?;
        summarize_seed(seed, &wf, bt)
    })?;
    let metric = |f: fn(&SeedSummary) -> Option<f64>| MetricStats::of(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(RepeatReport {
        seeds: seeds.to_vec(),
        map: metric(|r| r.map),
        aar: metric(|r| r.aar),
        sharpe: metric(|r| r.sharpe),
        test_accuracy: metric(|r| r.test_accuracy),
        runs,
    })
}

#[cfg(test)]
mod tests;
