//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use chrono::{NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clvsa::backtest::{coefficient_of_variation, simulate, CostModel, Signal, INITIAL_CAPITAL};
use clvsa::diffcore::{OpKind, Tape, Tensor};
use clvsa::gradsuite::toy_pair;
use clvsa::marketdata::{
    apply_normalizer, build_frames, calibrate_lambda, class_shares, fit_normalizer, generate_market, generate_synthetic,
    label, make_day_pairs, plan_walk_forward, Bar, Label, Regime, SynthConfig, TradingDay, WalkForward,
};
use clvsa::model::{forward_pass, Gaussian, Mode, Model, ModelConfig, ModelKind};
use clvsa::objective::{beta_at, kld_diag_gaussian, AnnealSchedule};
use clvsa::par::ExecMode;
use clvsa::trainer::{self, evaluate, fit_session_preprocessing, run_walk_forward, BacktestOptions, DataOptions, TrainConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clvsa"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

// ---- 1 ---------------------------------------------------------------------

fn gradient_fidelity() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let out = bin(&["gradcheck", "--scale", "toy", "--seeds", "10"], dir.path());
    let elapsed = started.elapsed();
    let table = String::from_utf8_lossy(&out.stdout).to_string();
    let rows: Vec<(String, f64)> = table
        .lines()
        .skip(1)
        .map(|l| {
            let cols: Vec<&str> = l.split_whitespace().collect();
            (cols[0].to_string(), cols[3].parse().unwrap())
        })
        .collect();
    let mut expected: Vec<&str> = OpKind::DIFFERENTIABLE.iter().map(|k| k.name()).collect();
    expected.push("objective");
    let all_listed = expected.iter().all(|n| rows.iter().filter(|(r, _)| r == n).count() == 1);
    let worst = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let seeds_ok = table.lines().skip(1).all(|l| l.split_whitespace().nth(1) == Some("10"));
    let pass = out.status.success() && all_listed && seeds_ok && worst <= 1e-4 && elapsed < Duration::from_secs(60);
    verdict(
        pass,
        format!(
            "{} components x 10 seeds, worst rel err {worst:.2e} (<= 1e-4), {:.1}s (< 60 s)",
            rows.len(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---- 2 ---------------------------------------------------------------------

fn kld(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let mut leaf = |v: &[f64]| tape.leaf(Tensor::vector(v.to_vec()).unwrap());
    let q = Gaussian {
        mu: leaf(mq),
        logvar: leaf(lq),
    };
    let p = Gaussian {
        mu: leaf(mp),
        logvar: leaf(lp),
    };
    let k = kld_diag_gaussian(&mut tape, &q, &p).unwrap();
    tape.scalar_value(k)
}

fn variational_correctness() -> Verdict {
    let same = kld(&[0.3, -1.2], &[0.5, -0.7], &[0.3, -1.2], &[0.5, -0.7]);
    let shifted = kld(&[1.0], &[0.0], &[0.0], &[0.0]);
    let wide = kld(&[0.0], &[4f64.ln()], &[0.0], &[0.0]);
    let wide_hand = 0.5 * (4.0 - 1.0 - 4f64.ln());
    let hand_ok = same.abs() <= 1e-9
        && (shifted - 0.5).abs() <= 1e-9
        && (wide - wide_hand).abs() <= 1e-9
        && (wide - 0.80685).abs() < 5e-6;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut min_kld = f64::INFINITY;
    for _ in 0..10_000 {
        let d = rng.random_range(1..=6);
        let mut draw = |lo: f64, hi: f64| (0..d).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        let (mq, lq, mp, lp) = (draw(-3.0, 3.0), draw(-5.0, 5.0), draw(-3.0, 3.0), draw(-5.0, 5.0));
        min_kld = min_kld.min(kld(&mq, &lq, &mp, &lp));
    }
    let sched = AnnealSchedule::new(1000).unwrap();
    let beta_ok = beta_at(0, &sched) == 0.0 && beta_at(1000, &sched) == 1.0 && beta_at(5000, &sched) == 1.0;
    verdict(
        hand_ok && min_kld >= 0.0 && beta_ok,
        format!("hand values {same:.1e}, {shifted}, {wide:.6}; min KLD over 1e4 draws {min_kld:.3e}; beta endpoints ok: {beta_ok}"),
    )
}

// ---- 3 ---------------------------------------------------------------------

fn softmax(x: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::vector(x.to_vec()).unwrap());
    let s = tape.softmax_last(v).unwrap();
    tape.data(s).to_vec()
}

fn attention_invariants() -> Verdict {
    let mut worst_sum: f64 = 0.0;
    let mut vectors = 0;
    for seed in 0..20 {
        let model = Model::new(ModelConfig::small(), seed).unwrap();
        let pair = toy_pair(seed + 100, 2 + seed as usize % 5);
        for mode in [Mode::Train, Mode::Eval] {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = forward_pass(&mut tape, &bound, &model.config, &pair, mode, &mut rng).unwrap();
            for w in &out.attention {
                worst_sum = worst_sum.max((tape.data(*w).iter().sum::<f64>() - 1.0).abs());
                vectors += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_shift: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=12);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let c = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        for (a, b) in softmax(&x).iter().zip(softmax(&shifted)) {
            worst_shift = worst_shift.max((a - b).abs());
        }
    }
    verdict(
        vectors > 0 && worst_sum <= 1e-9 && worst_shift <= 1e-12,
        format!("{vectors} attention vectors, worst |sum-1| {worst_sum:.1e} (<= 1e-9); softmax shift gap {worst_shift:.1e} (<= 1e-12)"),
    )
}

// ---- 4 ---------------------------------------------------------------------

fn synth_days(cfg: &SynthConfig) -> Vec<TradingDay> {
    build_frames(&generate_synthetic(cfg).unwrap(), cfg.frames_per_day)
}

fn overfit() -> Verdict {
    let days = synth_days(&SynthConfig {
        seed: 0,
        days: 9,
        frames_per_day: 8,
        session_start_minute: 9 * 60,
        ..SynthConfig::default()
    });
    let stats = fit_normalizer(&days).unwrap();
    let t = calibrate_lambda(&days, 10).unwrap();
    let pairs = make_day_pairs(&label(&apply_normalizer(&days, &stats), &t).unwrap(), 7).unwrap();
    let cfg = TrainConfig {
        iterations: 300,
        model: ModelConfig::small(),
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let out = trainer::train(&pairs, &[], &cfg, 0).unwrap();
    let elapsed = started.elapsed();
    let acc = evaluate(&out.last, &pairs, ExecMode::default()).unwrap().accuracy;
    verdict(
        pairs.len() == 8 && acc >= 0.95 && elapsed < Duration::from_secs(600),
        format!(
            "{} pairs, training accuracy {:.1}% (>= 95%) after 300 iterations in {:.0}s (< 600 s)",
            pairs.len(),
            100.0 * acc,
            elapsed.as_secs_f64()
        ),
    )
}

// ---- 5 ---------------------------------------------------------------------

/// Accuracy of predicting each frame's label by the majority label of its hidden regime.
fn bayes_accuracy(cfg: &SynthConfig) -> f64 {
    let market = generate_market(cfg).unwrap();
    let days = build_frames(&market.bars, cfg.frames_per_day);
    let t = calibrate_lambda(&days, 10).unwrap();
    let labeled = label(&days, &t).unwrap();
    let labels = labeled.iter().flat_map(|d| d.labels.iter().copied());
    let mut counts = [[0usize; 3]; 2];
    for (r, l) in market.frame_regimes().iter().zip(labels) {
        if let Some(l) = l {
            counts[(*r == Regime::Bull) as usize][l.class_index()] += 1;
        }
    }
    let total: usize = counts.iter().flatten().sum();
    counts.iter().map(|c| *c.iter().max().unwrap()).sum::<usize>() as f64 / total as f64
}

fn learnability() -> Verdict {
    let split = WalkForward {
        train_days: 120,
        val_days: 10,
        test_days: 20,
        shift_days: 20,
    };
    let mut details = Vec::new();
    let mut above = 0;
    let mut bayes_ok = true;
    for seed in 1..=5u64 {
        let synth = SynthConfig {
            seed,
            days: 150,
            frames_per_day: 8,
            session_start_minute: 8 * 60,
            persistence: 0.97,
            drift: 0.001,
            volatility: 0.001,
            ..SynthConfig::default()
        };
        let bayes = bayes_accuracy(&synth);
        bayes_ok &= bayes >= 0.55;
        let days = synth_days(&synth);
        let dates: Vec<_> = days.iter().map(|d| d.date).collect();
        let plan = plan_walk_forward(&dates, &split).unwrap();
        let cfg = TrainConfig {
            iterations: 300,
            seed,
            model: ModelConfig::small(),
            validation_every: 25,
            ..TrainConfig::default()
        };
        let opts = DataOptions {
            min_transitions: 30,
            ..DataOptions::default()
        };
        let wf = run_walk_forward(&days, &plan, &cfg, &opts, &BacktestOptions::default(), None).unwrap();
        let acc = trainer::accuracy(&wf.predictions).unwrap();
        above += (acc >= 0.45) as usize;
        details.push(format!("s{seed} bayes {bayes:.2} test {acc:.2}"));
    }
    verdict(
        bayes_ok && above >= 4,
        format!("{above}/5 seeds >= 45% (need 4); {}", details.join(", ")),
    )
}

// ---- 6 ---------------------------------------------------------------------

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn regularizer_direction() -> Verdict {
    let synth = SynthConfig {
        seed: 11,
        days: 60,
        frames_per_day: 8,
        session_start_minute: 8 * 60,
        drift: 0.0002,
        volatility: 0.002,
        ..SynthConfig::default()
    };
    let days = synth_days(&synth);
    let dates: Vec<_> = days.iter().map(|d| d.date).collect();
    let split = WalkForward {
        train_days: 40,
        val_days: 10,
        test_days: 10,
        shift_days: 10,
    };
    let plan = plan_walk_forward(&dates, &split).unwrap();
    let mut ces: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for kind in [ModelKind::Clvsa, ModelKind::Clsa] {
        for seed in 1..=5u64 {
            let cfg = TrainConfig {
                iterations: 200,
                seed,
                model: kind.apply(&ModelConfig::small()),
                validation_every: 50,
                ..TrainConfig::default()
            };
            let wf = run_walk_forward(&days, &plan, &cfg, &DataOptions::default(), &BacktestOptions::default(), None)
                .unwrap();
            ces.entry(kind.name()).or_default().push(wf.records[0].final_validation_ce.unwrap());
        }
    }
    let (v, c) = (&ces["clvsa"], &ces["clsa"]);
    let (mv, mc) = (median(v), median(c));
    let (cv_v, cv_c) = (coefficient_of_variation(v).unwrap(), coefficient_of_variation(c).unwrap());
    verdict(
        mv <= mc && cv_v <= cv_c,
        format!("median val CE clvsa {mv:.4} vs clsa {mc:.4}; CV {cv_v:.4} vs {cv_c:.4}; clvsa {v:.3?}, clsa {c:.3?}"),
    )
}

// ---- 7 ---------------------------------------------------------------------

fn at(i: usize) -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2020, 1, 2).unwrap().and_hms_opt(0, 0, 0).unwrap() + chrono::Duration::minutes(30 * i as i64)
}

/// Position-by-position replay, written independently of the simulator.
fn brute_force(labels: &[Label], prices: &[f64], cost: &CostModel) -> (f64, Vec<f64>) {
    let mut pnls = Vec::new();
    let mut held: i8 = 0;
    let mut entry = 0.0;
    let n = labels.len();
    for i in 0..n {
        let s = labels[i].signal();
        let exit_now = held != 0 && (i == n - 1 || (s != 0 && s != held));
        if exit_now {
            let gross = if held > 0 { prices[i] - entry } else { entry - prices[i] };
            pnls.push(gross * cost.multiplier - cost.round_trip_cost);
            held = 0;
        }
        if held == 0 && s != 0 && i < n - 1 {
            held = s;
            entry = prices[i];
        }
    }
    let mut realized = 0.0;
    for p in &pnls {
        realized += p;
    }
    (INITIAL_CAPITAL + realized, pnls)
}

/// Runs of equal consecutive directions among the non-Flat signals before the last bar.
fn direction_runs(labels: &[Label]) -> usize {
    let dirs: Vec<i8> = labels[..labels.len() - 1].iter().map(|l| l.signal()).filter(|s| *s != 0).collect();
    if dirs.is_empty() {
        0
    } else {
        1 + dirs.windows(2).filter(|w| w[0] != w[1]).count()
    }
}

fn backtest_oracle() -> Verdict {
    let cost = CostModel::crude_oil();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=80);
        let labels: Vec<Label> = (0..n).map(|_| Label::ALL[rng.random_range(0..3)]).collect();
        let mut p = rng.random_range(20.0..120.0);
        let prices: Vec<f64> = (0..n)
            .map(|_| {
                p = (p * (1.0 + rng.random_range(-0.01..0.01)) * 100.0_f64).round() / 100.0;
                p
            })
            .collect();
        let signals: Vec<Signal> = (0..n)
            .map(|i| Signal {
                timestamp: at(i),
                price: prices[i],
                prediction: labels[i],
            })
            .collect();
        let r = simulate(&signals, &cost, INITIAL_CAPITAL).unwrap();
        let (equity, pnls) = brute_force(&labels, &prices, &cost);
        let same = r.final_equity.to_bits() == equity.to_bits()
            && r.trades.len() == pnls.len()
            && r.trades.iter().zip(&pnls).all(|(t, p)| t.pnl.to_bits() == p.to_bits())
            && r.trades.len() == direction_runs(&labels);
        mismatches += (!same) as usize;
    }
    let worked: Vec<Signal> = [(Label::Up, 100.0), (Label::Flat, 101.0), (Label::Down, 102.0), (Label::Flat, 101.0)]
        .iter()
        .enumerate()
        .map(|(i, (l, px))| Signal {
            timestamp: at(i),
            price: *px,
            prediction: *l,
        })
        .collect();
    let example = simulate(&worked, &cost, INITIAL_CAPITAL).unwrap().final_equity;
    verdict(
        mismatches == 0 && example == 102829.0,
        format!("{mismatches}/1000 sequences differ from the oracle; worked example final equity {example}"),
    )
}

// ---- 8 ---------------------------------------------------------------------

fn labeling_balance() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut shown = Vec::new();
    for seed in 0..5 {
        let days = synth_days(&SynthConfig {
            seed,
            days: 50,
            drift: 0.0,
            ..SynthConfig::default()
        });
        let dates: Vec<_> = days.iter().map(|d| d.date).collect();
        let plan = plan_walk_forward(
            &dates,
            &WalkForward {
                train_days: 40,
                val_days: 5,
                test_days: 5,
                shift_days: 5,
            },
        )
        .unwrap();
        let train: Vec<TradingDay> = days.iter().filter(|d| plan.sessions[0].train.contains(d.date)).cloned().collect();
        let t = calibrate_lambda(&train, 1000).unwrap();
        let shares = class_shares(&label(&train, &t).unwrap());
        worst = shares.iter().fold(worst, |w, s| w.max((s - 1.0 / 3.0).abs()));
        shown.push(format!("{:.3}/{:.3}/{:.3}", shares[0], shares[1], shares[2]));
    }
    verdict(
        worst <= 0.05,
        format!("up/flat/down shares {}; worst deviation {worst:.3} (<= 0.05)", shown.join(", ")),
    )
}

// ---- 9 ---------------------------------------------------------------------

const TINY: &str = r#"{
  "data": {"frames_per_day": 8, "split": {"train_days": 8, "val_days": 2, "test_days": 2, "shift_days": 2}, "min_transitions": 10},
  "model": {"channels": 2, "z_dim": 4, "classifier_hidden": [16, 8], "prior_hidden": 16, "posterior_hidden": 16},
  "train": {"iterations": 8, "batch": 4, "validation_every": 4, "anneal_iterations": 10},
  "synth": {"seed": 4, "days": 16, "frames_per_day": 8, "session_start_minute": 540, "drift": 0.001}
}"#;

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    fs::write(w.join("cfg.json"), TINY).unwrap();
    let commands: [&[&str]; 5] = [
        &["synth", "--config", "cfg.json", "--out", "synth/bars.csv"],
        &["train", "--config", "cfg.json", "--data", "synth/bars.csv", "--out", "train", "--seed", "3"],
        &[
            "backtest",
            "--predictions",
            "train/reports/predictions.csv",
            "--prices",
            "train/reports/prices.csv",
            "--cost-preset",
            "CL",
            "--out",
            "bt",
        ],
        &["gradcheck", "--seeds", "2", "--out", "gc"],
        &["repeat", "--config", "cfg.json", "--data", "synth/bars.csv", "--out", "rep", "--seeds", "5,5"],
    ];
    let mut differing = Vec::new();
    for args in commands {
        let target = w.join(args[args.iter().position(|a| *a == "--out").unwrap() + 1]);
        let target = if args[0] == "synth" { target.parent().unwrap().to_path_buf() } else { target };
        let first = bin(args, w);
        assert!(first.status.success(), "{}: {}", args[0], String::from_utf8_lossy(&first.stderr));
        let a = snapshot(&target);
        let second = bin(args, w);
        assert!(second.status.success());
        if a != snapshot(&target) || a.is_empty() {
            differing.push(args[0]);
        }
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(w.join("rep/reports/repeat.json")).unwrap()).unwrap();
    let mut cvs = Vec::new();
    let mut zero = true;
    for metric in ["map", "aar", "sharpe"] {
        let m = &report[metric];
        zero &= m["std"].as_f64() == Some(0.0);
        if m["mean"].as_f64() != Some(0.0) {
            zero &= m["cv"].as_f64() == Some(0.0);
        }
        cvs.push(format!("{metric} {}", m["cv"]));
    }
    verdict(
        differing.is_empty() && zero,
        format!(
            "5 commands rerun byte-identical: {}; duplicate-seed CV {}",
            if differing.is_empty() { "yes".to_string() } else { format!("no ({})", differing.join(", ")) },
            cvs.join(", ")
        ),
    )
}

// ---- 10 --------------------------------------------------------------------

fn leak_freedom() -> Verdict {
    let synth = SynthConfig {
        seed: 21,
        days: 45,
        frames_per_day: 8,
        session_start_minute: 9 * 60,
        ..SynthConfig::default()
    };
    let bars = generate_synthetic(&synth).unwrap();
    let days = build_frames(&bars, 8);
    let dates: Vec<_> = days.iter().map(|d| d.date).collect();
    let plan = plan_walk_forward(
        &dates,
        &WalkForward {
            train_days: 20,
            val_days: 5,
            test_days: 5,
            shift_days: 5,
        },
    )
    .unwrap();
    let opts = DataOptions {
        min_transitions: 30,
        ..DataOptions::default()
    };
    let bits = |s: &(clvsa::marketdata::NormStats, clvsa::marketdata::LabelThresholds)| -> Vec<u64> {
        s.0.mean
            .iter()
            .chain(&s.0.std)
            .chain([&s.1.mu_c, &s.1.lambda])
            .map(|v| v.to_bits())
            .collect()
    };
    let mut equal = 0;
    for s in &plan.sessions {
        let full = fit_session_preprocessing(&days, s, &opts).unwrap();
        let kept: Vec<Bar> = bars
            .iter()
            .filter(|b| !(s.validation.contains(b.date) || s.test.contains(b.date)))
            .cloned()
            .collect();
        let cut = fit_session_preprocessing(&build_frames(&kept, 8), s, &opts).unwrap();
        equal += (bits(&full) == bits(&cut)) as usize;
    }
    verdict(
        equal == plan.sessions.len() && equal > 0,
        format!("{equal}/{} sessions bitwise equal after deleting validation/test bars", plan.sessions.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("gradient fidelity", gradient_fidelity),
        ("variational correctness", variational_correctness),
        ("attention/softmax invariants", attention_invariants),
        ("overfit check", overfit),
        ("learnability above chance", learnability),
        ("regularizer direction", regularizer_direction),
        ("backtest oracle", backtest_oracle),
        ("labeling balance", labeling_balance),
        ("determinism", determinism),
        ("leak-freedom", leak_freedom),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let started = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| verdict(false, "panicked"));
        failed += (!v.pass) as usize;
        println!(
            "{} criterion {n:>2} {name}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            started.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
