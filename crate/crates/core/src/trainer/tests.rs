use proptest::prelude::*;

use super::*;
use crate::diffcore::Tensor;
use crate::marketdata::{build_frames, generate_synthetic, plan_walk_forward, SynthConfig, WalkForward};

fn raw_days(seed: u64, days: usize, frames_per_day: usize) -> Vec<TradingDay> {
    let cfg = SynthConfig {
        seed,
        days,
        frames_per_day,
        session_start_minute: 9 * 60,
        ..SynthConfig::default()
    };
    build_frames(&generate_synthetic(&cfg).unwrap(), frames_per_day)
}

/// Eight labeled pairs of eight-frame days, normalized on themselves.
fn toy_pairs(seed: u64) -> Vec<DayPair> {
    let days = raw_days(seed, 9, 8);
    let stats = fit_normalizer(&days).unwrap();
    let t = calibrate_lambda(&days, 10).unwrap();
    let labeled = label(&apply_normalizer(&days, &stats), &t).unwrap();
    make_day_pairs(&labeled, 7).unwrap()
}

fn small_cfg(kind: ModelKind, iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch: 4,
        seed: 3,
        model: kind.apply(&ModelConfig::small()),
        anneal_iterations: 10,
        validation_every: 5,
        ..TrainConfig::default()
    }
}

fn store_with(values: &[f64]) -> ParamStore {
    let cfg = ModelConfig::small();
    let mut store = ParamStore::zeros(&cfg).unwrap();
    let name = store.names()[0].clone();
    let shape = store.get(&name).unwrap().shape().to_vec();
    let mut data = vec![0.0; shape.iter().product()];
    data[..values.len()].copy_from_slice(values);
    store.set(&name, Tensor::new(shape, data).unwrap()).unwrap();
    store
}

fn grads_for(store: &ParamStore, first: &[f64]) -> Vec<Vec<f64>> {
    let mut g: Vec<Vec<f64>> = (0..store.len()).map(|i| vec![0.0; store.tensor(i).len()]).collect();
    g[0][..first.len()].copy_from_slice(first);
    g
}

#[test]
fn first_adam_step_closed_form() {
    let mut store = store_with(&[0.5]);
    let mut state = AdamState::new(&store);
    let g = grads_for(&store, &[1.0]);
    adam_step(&mut store, &g, &mut state, &AdamConfig::default()).unwrap();
    // m̂ = 1, v̂ = 1 after bias correction
    let expected = 0.5 - 0.001 * (1.0 / (1.0 + 1e-8));
    assert!((store.tensor(0).data()[0] - expected).abs() < 1e-15);
    assert!((store.tensor(0).data()[0] - 0.5 + 0.000999999).abs() < 1e-9);
    assert_eq!(state.step, 1);
}

#[test]
fn zero_gradients_leave_parameters_alone() {
    let mut store = store_with(&[0.25, -0.75]);
    let before = store.clone();
    let mut state = AdamState::new(&store);
    let g = grads_for(&store, &[]);
    for _ in 0..20 {
        adam_step(&mut store, &g, &mut state, &AdamConfig::default()).unwrap();
    }
    assert_eq!(store, before);
}

#[test]
fn adam_rejects_mismatched_gradients() {
    let mut store = store_with(&[]);
    let mut state = AdamState::new(&store);
    let mut g = grads_for(&store, &[]);
    g[1].pop();
    assert!(matches!(
        adam_step(&mut store, &g, &mut state, &AdamConfig::default()),
        Err(TrainError::GradShape { index: 1, .. })
    ));
    assert!(adam_step(&mut store, &g[..2], &mut state, &AdamConfig::default()).is_err());
}

proptest! {
    #[test]
    fn adam_matches_scalar_reference(grads in prop::collection::vec(-5.0f64..5.0, 1..30), p0 in -1.0f64..1.0) {
        let cfg = AdamConfig::default();
        let mut store = store_with(&[p0]);
        let mut state = AdamState::new(&store);
        let (mut p, mut m, mut v) = (p0, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let gv = grads_for(&store, &[*g]);
            adam_step(&mut store, &gv, &mut state, &cfg).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vhat = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            p -= 0.001 * mhat / (vhat.sqrt() + 1e-8);
        }
        prop_assert!((store.tensor(0).data()[0] - p).abs() < 1e-12);
    }
}

#[test]
fn minibatch_draws_with_replacement_and_repeats_by_seed() {
    let pool: Vec<usize> = (0..8).collect();
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_minibatch(&pool, 16, &mut rng).unwrap().into_iter().copied().collect::<Vec<_>>()
    };
    let a = draw(1);
    assert_eq!(a.len(), 16);
    let mut distinct = a.clone();
    distinct.sort();
    distinct.dedup();
    assert!(distinct.len() < 16);
    assert_eq!(a, draw(1));
    assert_ne!(a, draw(2));
    let empty: Vec<usize> = Vec::new();
    assert!(matches!(
        sample_minibatch(&empty, 1, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(TrainError::EmptyPool)
    ));
}

#[test]
fn minibatch_frequencies_are_uniform() {
    let pool: Vec<usize> = (0..10).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let mut counts = [0usize; 10];
    for i in sample_minibatch(&pool, n, &mut rng).unwrap() {
        counts[*i] += 1;
    }
    let p = 0.1;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn derived_seeds_separate_streams() {
    assert_eq!(derive_seed(&[1, 2, 3]), derive_seed(&[1, 2, 3]));
    assert_ne!(derive_seed(&[1, 2, 3]), derive_seed(&[1, 3, 2]));
    assert_ne!(derive_seed(&[0]), derive_seed(&[0, 0]));
}

#[test]
fn config_validation() {
    let mut cfg = small_cfg(ModelKind::Clvsa, 1);
    assert!(cfg.validate().is_ok());
    cfg.batch = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = small_cfg(ModelKind::Clvsa, 1);
    cfg.anneal_iterations = 0;
    assert!(cfg.validate().is_err());
}

#[test]
fn training_lowers_cross_entropy_below_chance() {
    let pairs = toy_pairs(1);
    assert_eq!(pairs.len(), 8);
    let mut cfg = small_cfg(ModelKind::Clvsa, 300);
    cfg.batch = 16;
    let out = train(&pairs, &[], &cfg, 0).unwrap();
    let stats = evaluate(&out.last, &pairs, ExecMode::Parallel).unwrap();
    assert!(stats.ce < 3f64.ln(), "training ce {}", stats.ce);
    assert_eq!(out.log.len(), 300);
}

#[test]
fn log_betas_follow_the_schedule_and_clsa_has_no_kld() {
    let pairs = toy_pairs(2);
    let cfg = small_cfg(ModelKind::Clsa, 14);
    let out = train(&pairs, &pairs[..2], &cfg, 0).unwrap();
    let schedule = AnnealSchedule::new(10).unwrap();
    for (k, bd) in &out.log {
        assert_eq!(bd.kld, 0.0);
        assert_eq!(bd.ce_backward, 0.0);
        assert_eq!(bd.beta, beta_at(*k, &schedule));
    }
    assert_eq!(out.log.last().unwrap().1.beta, 1.0);
    let iters: Vec<usize> = out.validation.iter().map(|v| v.iteration).collect();
    assert_eq!(iters, [5, 10, 14]);

    let out = train(&pairs, &[], &small_cfg(ModelKind::Clvsa, 3), 0).unwrap();
    assert!(out.log.iter().all(|(_, bd)| bd.kld > 0.0 && bd.ce_backward > 0.0));
}

#[test]
fn sequential_and_parallel_training_agree_bitwise() {
    let pairs = toy_pairs(3);
    let mut cfg = small_cfg(ModelKind::Clvsa, 6);
    cfg.exec = ExecMode::Sequential;
    let a = train(&pairs, &pairs[..3], &cfg, 1).unwrap();
    cfg.exec = ExecMode::Parallel;
    let b = train(&pairs, &pairs[..3], &cfg, 1).unwrap();
    assert_eq!(a.last.params, b.last.params);
    assert_eq!(a.best.params, b.best.params);
    assert_eq!(a.log, b.log);
    let c = train(&pairs, &pairs[..3], &cfg, 2).unwrap();
    assert_ne!(a.last.params, c.last.params);
}

#[test]
fn validation_never_changes_the_trajectory() {
    let pairs = toy_pairs(4);
    let cfg = small_cfg(ModelKind::Clvsa, 7);
    let with = train(&pairs, &pairs[..4], &cfg, 0).unwrap();
    let without = train(&pairs, &[], &cfg, 0).unwrap();
    assert_eq!(with.last.params, without.last.params);
    assert_eq!(with.log, without.log);
    let best_ce = with.validation.iter().map(|v| v.ce).fold(f64::INFINITY, f64::min);
    let at_best = with.validation.iter().find(|v| v.iteration == with.best_iteration).unwrap();
    assert_eq!(at_best.ce, best_ce);
}

#[test]
fn every_kind_trains_end_to_end() {
    let pairs = toy_pairs(5);
    for kind in ModelKind::ALL {
        let out = train(&pairs, &pairs[..2], &small_cfg(kind, 3), 0).unwrap();
        assert!(out.log.iter().all(|(_, bd)| bd.is_finite()), "{kind}");
    }
}

#[test]
fn clsa_is_a_strict_subset_of_clvsa() {
    let base = ModelConfig::small();
    let clvsa = ParamStore::zeros(&assemble_baseline(ModelKind::Clvsa, &base)).unwrap();
    let clsa = ParamStore::zeros(&assemble_baseline(ModelKind::Clsa, &base)).unwrap();
    assert!(clsa.parameter_count() < clvsa.parameter_count());
    for name in clsa.names() {
        if !name.starts_with("cls.fc0") {
            assert!(clvsa.get(name).is_some(), "{name}");
        }
    }
}

#[test]
fn non_finite_loss_aborts_with_the_iteration() {
    let pairs = toy_pairs(6);
    let mut cfg = small_cfg(ModelKind::Clsa, 5);
    cfg.adam.lr = 1e300;
    match train(&pairs, &[], &cfg, 0) {
        Err(e @ (TrainError::NonFinite { .. } | TrainError::NonFiniteGradient { .. })) => {
            assert!(e.is_numerical());
            assert!(e.to_string().contains("iteration"));
        }
        Err(TrainError::Model(_)) => {}
        other => panic!("expected a numerical failure, got {other:?}"),
    }
}

fn plan_for(days: &[TradingDay]) -> SplitPlan {
    let w = WalkForward {
        train_days: 8,
        val_days: 2,
        test_days: 2,
        shift_days: 2,
    };
    let dates: Vec<_> = days.iter().map(|d| d.date).collect();
    plan_walk_forward(&dates, &w).unwrap()
}

fn wf_opts() -> DataOptions {
    DataOptions {
        max_gap_days: 4,
        min_transitions: 10,
    }
}

#[test]
fn walk_forward_three_sessions() {
    let days = raw_days(7, 16, 8);
    let plan = plan_for(&days);
    assert_eq!(plan.sessions.len(), 3);
    let cfg = small_cfg(ModelKind::Clvsa, 4);
    let bt = BacktestOptions::default();
    let a = run_walk_forward(&days, &plan, &cfg, &wf_opts(), &bt, None).unwrap();
    assert_eq!(a.records.len(), 3);
    assert!(a.predictions.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
    // test windows of two days shifting by two: no overlap, every test frame once
    assert_eq!(a.predictions.len(), 3 * 2 * 8);
    for s in &plan.sessions {
        let from_s = a.predictions.iter().filter(|p| s.test.contains(p.timestamp.date()));
        assert!(from_s.into_iter().all(|p| p.session == s.id));
    }
    let b = run_walk_forward(&days, &plan, &cfg, &wf_opts(), &bt, None).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.predictions, b.predictions);
}

#[test]
fn overlapping_windows_take_the_earliest_session() {
    let days = raw_days(8, 15, 8);
    let w = WalkForward {
        train_days: 8,
        val_days: 2,
        test_days: 4,
        shift_days: 1,
    };
    let dates: Vec<_> = days.iter().map(|d| d.date).collect();
    let plan = plan_walk_forward(&dates, &w).unwrap();
    assert_eq!(plan.sessions.len(), 2);
    let res = run_walk_forward(&days, &plan, &small_cfg(ModelKind::Clsa, 2), &wf_opts(), &BacktestOptions::default(), None)
        .unwrap();
    assert_eq!(res.predictions.len(), 5 * 8);
    assert!(res.predictions[..32].iter().all(|p| p.session == 0));
    assert!(res.predictions[32..].iter().all(|p| p.session == 1));
}

#[test]
fn session_preprocessing_ignores_later_days() {
    let days = raw_days(9, 16, 8);
    let plan = plan_for(&days);
    for s in &plan.sessions {
        let full = fit_session_preprocessing(&days, s, &wf_opts()).unwrap();
        let truncated: Vec<TradingDay> = days.iter().filter(|d| d.date <= s.train.end).cloned().collect();
        let cut = fit_session_preprocessing(&truncated, s, &wf_opts()).unwrap();
        assert_eq!(full.0, cut.0);
        assert_eq!(full.1.lambda.to_bits(), cut.1.lambda.to_bits());
        assert_eq!(full.1.mu_c.to_bits(), cut.1.mu_c.to_bits());
    }
}

#[test]
fn prepared_sessions_label_each_split_separately() {
    let days = raw_days(10, 16, 8);
    let plan = plan_for(&days);
    let data = prepare_session(&days, &plan.sessions[0], &wf_opts()).unwrap();
    assert_eq!(data.train.len(), 7);
    assert_eq!(data.validation.len(), 2);
    assert_eq!(data.test.len(), 2);
    let last_val = data.validation.last().unwrap();
    assert_eq!(*last_val.day_b.labels.last().unwrap(), None);
    assert!(last_val.day_b.labels[..7].iter().all(Option::is_some));
    assert_eq!(data.test[0].day_a.date, last_val.day_b.date);
}

#[test]
fn outputs_written_per_run() {
    let days = raw_days(11, 14, 8);
    let plan = plan_for(&days);
    let dir = tempfile::tempdir().unwrap();
    let res = run_walk_forward(
        &days,
        &plan,
        &small_cfg(ModelKind::Clsa, 2),
        &wf_opts(),
        &BacktestOptions::default(),
        Some(dir.path()),
    )
    .unwrap();
    let r = &res.records[0];
    assert_eq!(r.checkpoint.as_deref(), Some("checkpoints/seed-3-session-000.json"));
    let (cfg, _) = crate::model::load_checkpoint(&dir.path().join(r.checkpoint.as_ref().unwrap())).unwrap();
    assert!(!cfg.variational);
    let log = std::fs::read_to_string(dir.path().join("logs/seed-3-session-000.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with(crate::objective::LOG_HEADER));
}

#[test]
fn metric_stats_hand_values() {
    let s = MetricStats::of(&[Some(1.0), Some(2.0), Some(3.0)]).unwrap();
    assert_eq!((s.mean, s.std, s.cv), (2.0, 1.0, Some(0.5)));
    assert_eq!(MetricStats::of(&[Some(1.0), None]), None);
    assert_eq!(MetricStats::of(&[Some(1.0)]), None);
}

#[test]
fn repeated_identical_seeds_have_zero_dispersion() {
    let days = raw_days(12, 14, 8);
    let plan = plan_for(&days);
    let cfg = small_cfg(ModelKind::Clvsa, 3);
    let report = repeat_runs(&days, &plan, &cfg, &wf_opts(), &BacktestOptions::default(), &[5, 5], None).unwrap();
    assert_eq!(report.runs.len(), 2);
    assert_eq!(report.runs[0], report.runs[1]);
    let map = report.map.unwrap();
    assert_eq!(map.std, 0.0);
    assert_eq!(map.cv, Some(0.0));
    assert!(matches!(
        repeat_runs(&days, &plan, &cfg, &wf_opts(), &BacktestOptions::default(), &[5], None),
        Err(TrainError::TooFewSeeds(1))
    ));
}

#[test]
fn prediction_and_price_files_read_back() {
    let days = raw_days(13, 14, 8);
    let plan = plan_for(&days);
    let res = run_walk_forward(&days, &plan, &small_cfg(ModelKind::Clsa, 2), &wf_opts(), &BacktestOptions::default(), None)
        .unwrap();
    let mut preds = Vec::new();
    write_predictions_csv(&res.predictions, &mut preds).unwrap();
    let mut prices = Vec::new();
    write_prices_csv(&res.predictions, &mut prices).unwrap();
    let rows = backtest::read_predictions(preds.as_slice()).unwrap();
    assert_eq!(rows, prediction_rows(&res.predictions));
    let px = backtest::read_prices(prices.as_slice()).unwrap();
    assert_eq!(px, price_rows(&res.predictions));
    // the last test frame of each day has no next frame to label
    assert!(rows.iter().any(|r| r.truth.is_none()));
}
