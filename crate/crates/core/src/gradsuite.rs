//! Finite-difference audit of every differentiable operation, one recurrent
//! cell step and the full training objective.

use std::fmt;
use std::str::FromStr;

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{grad_check, DiffError, GradCheckOptions, Kernel, OpKind, Tape, Tensor, Var};
use crate::marketdata::{DayPair, Frame, Label, TradingDay, ATTRIBUTES, STEPS};
use crate::model::{convlstm_step, forward_pass, ConvLstmParams, LstmState, Mode, ModelConfig, ModelError, ParamStore};
use crate::objective::{total_objective, ObjectiveError, ObjectiveWeights};
use crate::par::ExecMode;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 10;
/// Frames per day in the objective check.
pub const CHECK_FRAMES: usize = 2;
const CHECK_WEIGHTS: ObjectiveWeights = ObjectiveWeights { alpha: 0.5, gamma: 0.01 };
const CHECK_BETA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum GradSuiteError {
    #[error("unknown scale `{0}` (expected toy or full)")]
    UnknownScale(String),
    #[error("at least one seed is required")]
    NoSeeds,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Toy,
    Full,
}

impl FromStr for Scale {
    type Err = GradSuiteError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "toy" => Ok(Scale::Toy),
            "full" => Ok(Scale::Full),
            other => Err(GradSuiteError::UnknownScale(other.to_string())),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Toy => "toy",
            Scale::Full => "full",
        })
    }
}

impl Scale {
    /// Model used by the objective check; dropout is always off.
    pub fn model_config(self) -> ModelConfig {
        let base = match self {
            Scale::Toy => ModelConfig {
                channels: 2,
                z_dim: 3,
                classifier_hidden: [8, 4],
                prior_hidden: 8,
                posterior_hidden: 8,
                ..ModelConfig::default()
            },
            Scale::Full => ModelConfig::default(),
        };
        ModelConfig { dropout: 0.0, ..base }
    }

    /// Coordinates probed per parameter tensor in the objective check.
    fn objective_coords(self) -> usize {
        match self {
            Scale::Toy => 6,
            Scale::Full => 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub scale: Scale,
    pub seeds: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Corrupts one backward rule; the suite must then fail.
    pub fault: Option<OpKind>,
    pub exec: ExecMode,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            scale: Scale::Toy,
            seeds: DEFAULT_SEEDS,
            step: 1e-5,
            tolerance: DEFAULT_TOLERANCE,
            fault: None,
            exec: ExecMode::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentResult {
    pub name: String,
    pub seeds: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub scale: Scale,
    pub tolerance: f64,
    pub components: Vec<ComponentResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.components.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    /// Fixed-width table, one row per component.
    pub fn table(&self) -> String {
        let mut s = format!("{:<20} {:>6} {:>8} {:>12}  result\n", "component", "seeds", "coords", "max_rel_err");
        for c in &self.components {
            s += &format!(
                "{:<20} {:>6} {:>8} {:>12.3e}  {}\n",
                c.name,
                c.seeds,
                c.coords_checked,
                c.max_rel_error,
                if c.passed { "pass" } else { "FAIL" }
            );
        }
        s
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Values with magnitude in `[gap, 1]`, so kinks at zero stay out of reach.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

type Loss = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, DiffError> + Sync>;

/// Inputs and a scalar function exercising one operation.
fn op_case(kind: OpKind, seed: u64) -> (Vec<Tensor>, Loss) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = |rng: &mut ChaCha8Rng, n: usize| uniform(rng, &[n], -1.5, 1.5);
    match kind {
        OpKind::Add => (
            vec![v(&mut rng, 4), v(&mut rng, 4)],
            Box::new(|t, p| {
                let y = t.add(p[0], p[1])?;
                t.sum_squares(y)
            }),
        ),
        OpKind::Hadamard => (
            vec![v(&mut rng, 4), v(&mut rng, 4)],
            Box::new(|t, p| {
                let y = t.hadamard(p[0], p[1])?;
                t.sum_squares(y)
            }),
        ),
        OpKind::Sigmoid => (
            vec![v(&mut rng, 5)],
            Box::new(|t, p| {
                let y = t.sigmoid(p[0])?;
                t.sum_squares(y)
            }),
        ),
        OpKind::Tanh => (
            vec![v(&mut rng, 5)],
            Box::new(|t, p| {
                let y = t.tanh(p[0])?;
                t.sum_squares(y)
            }),
        ),
        OpKind::Relu => (
            vec![off_kink(&mut rng, &[6], 0.1)],
            Box::new(|t, p| {
                let y = t.relu(p[0])?;
                t.sum_squares(y)
            }),
        ),
        OpKind::Affine => (
            vec![uniform(&mut rng, &[3, 4], -1.0, 1.0), v(&mut rng, 4), v(&mut rng, 3)],
            Box::new(|t, p| {
                let y = t.affine(p[0], p[1], p[2])?;
                t.sum_squares(y)
            }),
        ),
        OpKind::MatVecT => (
            vec![uniform(&mut rng, &[4, 3], -1.0, 1.0), v(&mut rng, 4)],
            Box::new(|t, p| {
                let y = t.matvec_t(p[0], p[1])?;
                t.sum_squares(y)
            }),
        ),
        OpKind::Conv1dRowShared => (
            vec![
                uniform(&mut rng, &[ATTRIBUTES, STEPS, 2], -1.0, 1.0),
                uniform(&mut rng, &[3, 2, 3], -1.0, 1.0),
                v(&mut rng, 3),
            ],
            Box::new(|t, p| {
                let k = Kernel::new(t, p[1], p[2])?;
                let y = t.conv1d_row_shared(p[0], &k)?;
                t.sum_squares(y)
            }),
        ),
        OpKind::SoftmaxLast => (
            vec![uniform(&mut rng, &[2, 3], -2.0, 2.0)],
            Box::new(|t, p| {
                let y = t.softmax_last(p[0])?;
                t.sum_squares(y)
            }),
        ),
        OpKind::ConcatLast => (
            vec![uniform(&mut rng, &[2, 2], -1.0, 1.0), uniform(&mut rng, &[2, 3], -1.0, 1.0)],
            Box::new(|t, p| {
                let y = t.concat_last(p[0], p[1])?;
                let y = t.tanh(y)?;
                t.sum_squares(y)
            }),
        ),
        OpKind::CrossEntropy => {
            let label = rng.random_range(0..3);
            (
                vec![v(&mut rng, 3)],
                Box::new(move |t, p| {
                    let probs = t.softmax_last(p[0])?;
                    t.cross_entropy(probs, label)
                }),
            )
        }
        OpKind::Reparameterize => {
            let eps = v(&mut rng, 4);
            (
                vec![v(&mut rng, 4), v(&mut rng, 4)],
                Box::new(move |t, p| {
                    let z = t.reparameterize(p[0], p[1], &eps)?;
                    t.sum_squares(z)
                }),
            )
        }
        OpKind::Dropout => {
            let mask: Vec<f64> = (0..6).map(|_| if rng.random::<f64>() < 0.3 { 0.0 } else { 1.0 / 0.7 }).collect();
            (
                vec![v(&mut rng, 6)],
                Box::new(move |t, p| {
                    let y = t.dropout_with_mask(p[0], mask.clone())?;
                    t.sum_squares(y)
                }),
            )
        }
        OpKind::Stack => (
            vec![v(&mut rng, 3), v(&mut rng, 3)],
            Box::new(|t, p| {
                let y = t.stack(&[p[0], p[1]])?;
                let y = t.tanh(y)?;
                t.sum_squares(y)
            }),
        ),
        OpKind::Reshape => (
            vec![uniform(&mut rng, &[2, 3], -1.0, 1.0)],
            Box::new(|t, p| {
                let y = t.reshape(p[0], &[3, 2])?;
                let y = t.softmax_last(y)?;
                t.sum_squares(y)
            }),
        ),
        OpKind::Sum => (
            vec![v(&mut rng, 5)],
            Box::new(|t, p| {
                let y = t.sigmoid(p[0])?;
                t.sum(y)
            }),
        ),
        OpKind::Scale => (
            vec![v(&mut rng, 4)],
            Box::new(|t, p| {
                let y = t.scale(p[0], -0.7)?;
                t.sum_squares(y)
            }),
        ),
        OpKind::SumSquares => (vec![v(&mut rng, 5)], Box::new(|t, p| t.sum_squares(p[0]))),
        OpKind::KldDiagGaussian => (
            vec![v(&mut rng, 3), v(&mut rng, 3), v(&mut rng, 3), v(&mut rng, 3)],
            Box::new(|t, p| t.kld_diag_gaussian(p[0], p[1], p[2], p[3])),
        ),
        OpKind::Clamp => {
            // half the entries inside the band, half saturated, none near an edge
            let x = Tensor::vector(
                (0..6)
                    .map(|i| {
                        let m = if i % 2 == 0 { rng.random_range(0.0..0.4) } else { rng.random_range(0.6..1.5) };
                        if rng.random::<bool>() {
                            m
                        } else {
                            -m
                        }
                    })
                    .collect(),
            )
            .expect("vector");
            (
                vec![x],
                Box::new(|t, p| {
                    let y = t.clamp(p[0], -0.5, 0.5)?;
                    t.sum_squares(y)
                }),
            )
        }
        OpKind::Leaf => (vec![v(&mut rng, 2)], Box::new(|t, p| t.sum_squares(p[0]))),
    }
}

fn convlstm_case(seed: u64) -> (Vec<Tensor>, Loss) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cin, ch) = (2, 2);
    let grid = |rng: &mut ChaCha8Rng, c| uniform(rng, &[ATTRIBUTES, STEPS, c], -1.0, 1.0);
    let mut params = vec![grid(&mut rng, cin), grid(&mut rng, ch), grid(&mut rng, ch)];
    for _ in 0..4 {
        params.push(uniform(&mut rng, &[3, cin + ch, ch], -0.6, 0.6));
        params.push(uniform(&mut rng, &[ch], -0.3, 0.3));
    }
    let f: Loss = Box::new(|t, p| {
        let k = |t: &Tape, g: usize| Kernel::new(t, p[3 + 2 * g], p[4 + 2 * g]);
        let cell = ConvLstmParams {
            gates: [k(t, 0)?, k(t, 1)?, k(t, 2)?, k(t, 3)?],
        };
        let state = LstmState { h: p[1], c: p[2] };
        let next = convlstm_step(t, &cell, p[0], &state).map_err(into_diff)?;
        let h = t.sum_squares(next.h)?;
        let c = t.sum(next.c)?;
        t.weighted_sum(&[(h, 1.0), (c, 0.5)])
    });
    (params, f)
}

fn into_diff(e: ModelError) -> DiffError {
    match e {
        ModelError::Diff(d) => d,
        other => DiffError::Function(other.to_string()),
    }
}

fn objective_into_diff(e: ObjectiveError) -> DiffError {
    match e {
        ObjectiveError::Diff(d) => d,
        other => DiffError::Function(other.to_string()),
    }
}

/// Two consecutive random days of `frames` frames each, labeled cyclically
/// from a seeded offset.
pub fn toy_pair(seed: u64, frames: usize) -> DayPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let day = |date: NaiveDate, rng: &mut ChaCha8Rng| {
        let start = date.and_hms_opt(9, 0, 0).expect("valid time");
        let offset = rng.random_range(0..3);
        let frames: Vec<Frame> = (0..frames)
            .map(|i| {
                let mut values = [[0.0; STEPS]; ATTRIBUTES];
                for v in values.iter_mut().flatten() {
                    *v = rng.random_range(-1.5..1.5);
                }
                Frame {
                    start: start + Duration::minutes(30 * i as i64),
                    values,
                    close_raw: 100.0,
                }
            })
            .collect();
        let labels = (0..frames.len()).map(|i| Label::from_class_index((i + offset) % 3)).collect();
        TradingDay { date, frames, labels }
    };
    let d0 = NaiveDate::from_ymd_opt(2020, 1, 6).expect("valid date");
    let a = day(d0, &mut rng);
    let b = day(d0 + Duration::days(1), &mut rng);
    DayPair::new(a, b)
}

fn objective_case(cfg: &ModelConfig, seed: u64) -> Result<(Vec<Tensor>, Loss), GradSuiteError> {
    let store = ParamStore::init(cfg, seed)?;
    let pair = toy_pair(seed, CHECK_FRAMES);
    let cfg = cfg.clone();
    let names = store.clone();
    let f: Loss = Box::new(move |t, p| {
        let bound = names.bind_vars(p.to_vec());
        // a fresh stream per evaluation pins eps
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = forward_pass(t, &bound, &cfg, &pair, Mode::Train, &mut rng).map_err(into_diff)?;
        let (loss, _) = total_objective(
            t,
            &out,
            &pair.day_b.labels,
            &pair.day_b_reversed.labels,
            bound.vars(),
            CHECK_BETA,
            &CHECK_WEIGHTS,
        )
        .map_err(objective_into_diff)?;
        Ok(loss)
    });
    Ok((store.tensors(), f))
}

fn check_component<C>(name: &str, opts: &SuiteOptions, max_coords: Option<usize>, case: C) -> Result<ComponentResult, GradSuiteError>
where
    C: Fn(u64) -> Result<(Vec<Tensor>, Loss), GradSuiteError>,
{
    let mut max_rel_error: f64 = 0.0;
    let mut coords_checked = 0;
    for seed in 0..opts.seeds as u64 {
        let (params, f) = case(seed)?;
        let gc = GradCheckOptions {
            step: opts.step,
            max_coords,
            seed,
            exec: opts.exec,
            fault: opts.fault,
        };
        let report = grad_check(&params, f, &gc)?;
        max_rel_error = max_rel_error.max(report.max_rel_error);
        coords_checked += report.per_param.iter().map(|p| p.coords_checked).sum::<usize>();
    }
    Ok(ComponentResult {
        name: name.to_string(),
        seeds: opts.seeds,
        coords_checked,
        max_rel_error,
        passed: max_rel_error <= opts.tolerance,
    })
}

/// Runs every check; a component passes when its worst relative error over
/// all seeds is within tolerance.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport, GradSuiteError> {
    if opts.seeds == 0 {
        return Err(GradSuiteError::NoSeeds);
    }
    let mut components = Vec::with_capacity(OpKind::DIFFERENTIABLE.len() + 2);
    for kind in OpKind::DIFFERENTIABLE {
        components.push(check_component(kind.name(), opts, None, |s| Ok(op_case(kind, s)))?);
    }
    components.push(check_component("convlstm_step", opts, None, |s| Ok(convlstm_case(s)))?);
    let cfg = opts.scale.model_config();
    components.push(check_component("objective", opts, Some(opts.scale.objective_coords()), |s| {
        objective_case(&cfg, s)
    })?);
    Ok(SuiteReport {
        scale: opts.scale,
        tolerance: opts.tolerance,
        components,
    })
}
