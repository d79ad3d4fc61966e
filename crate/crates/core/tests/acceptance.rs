//! Acceptance criteria. Each test prints one `[PASS]`/`[FAIL]` line per check
//! (run with `--nocapture` to see them) and then asserts.

use std::sync::OnceLock;

use pacer_core::detectors::{
    Bracket, CompletionStatus, CurrentHeuristicState, DriftPolicy, SuccessiveApproximation, Verdict,
};
use pacer_core::devices::{
    builtin_model, builtin_models, CompletionDistribution, ControlBaseline, ControlTargets, DeviceModel, MixEntry,
    OperationSpec, WaitShape,
};
use pacer_core::harness::{
    calibrate, run_convergence_study, run_experiment, run_suite, DetectorKind, DriftSchedule, ExperimentConfig,
    Quantity, SuiteReport,
};
use pacer_core::power::{apply_iodvs, IodvsPolicy};
use pacer_core::trace::{energy_by_state, energy_integrate, CurrentTrace, DeviceState, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 1;

fn suite() -> &'static SuiteReport {
    static SUITE: OnceLock<SuiteReport> = OnceLock::new();
    SUITE.get_or_init(|| run_suite(SEED).expect("suite runs"))
}

/// Prints the verdict line and returns whether it passed.
fn check(criterion: &str, name: &str, passed: bool, detail: String) -> bool {
    println!("[{}] {criterion} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    passed
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol
}

fn diff(stem: &str, quantity: Quantity, stage: &str, iodvs: bool) -> f64 {
    let t = suite().table(stem).unwrap_or_else(|| panic!("table {stem}"));
    let r = t.row(quantity, stage).unwrap_or_else(|| panic!("{stem} row {stage}"));
    if iodvs {
        r.diff_iodvs_pct.expect("iodvs column")
    } else {
        r.diff_pct
    }
}

fn pp_check(criterion: &str, name: &str, value: f64, target: f64, tol: f64) -> bool {
    check(
        criterion,
        name,
        within(value, target, tol),
        format!("{value:.2}% (target {target}% +/- {tol} pp)"),
    )
}

#[test]
fn c1_control_calibration_within_2_percent() {
    let mut ok = true;
    for m in builtin_models() {
        let cal = calibrate(&m, SEED).unwrap();
        for r in &cal.rows {
            ok &= check(
                "1 calibration",
                &format!("{} {}", m.name, r.quantity),
                r.deviation_pct.abs() <= 2.0,
                format!("measured {:.3} vs {:.3} ({:+.2}%)", r.measured, r.target, r.deviation_pct),
            );
        }
        assert!(!cal.rows.is_empty(), "{} has no targets", m.name);
    }
    assert!(ok);
}

#[test]
fn c2_timing_heuristic_latency() {
    let ok = [
        pp_check("2 latency", "eeprom wait", diff("table1_eeprom", Quantity::Latency, "Wait", false), 30.5, 3.0),
        pp_check("2 latency", "nor wait", diff("table2_nor_flash", Quantity::Latency, "Wait", false), 70.0, 5.0),
        pp_check("2 latency", "nand wait", diff("table3_nand_flash", Quantity::Latency, "Wait", false), 66.6, 5.0),
    ];
    assert!(ok.iter().all(|&b| b));
}

#[test]
fn c3_timing_heuristic_energy() {
    let ok = [
        pp_check("3 energy", "nor all", diff("table2_nor_flash", Quantity::Energy, "All", false), 38.9, 5.0),
        pp_check("3 energy", "nand all", diff("table3_nand_flash", Quantity::Energy, "All", false), 17.8, 5.0),
    ];
    assert!(ok.iter().all(|&b| b));
}

#[test]
fn c4_voltage_scaling() {
    let ok = [
        pp_check("4 iodvs", "eeprom wait energy", diff("table1_eeprom", Quantity::Energy, "Wait", true), 40.5, 5.0),
        pp_check("4 iodvs", "nor all energy", diff("table2_nor_flash", Quantity::Energy, "All", true), 49.1, 5.0),
        pp_check("4 iodvs", "swissbit energy", diff("table4_sd_cards", Quantity::Energy, "sd_swissbit", true), 80.0, 8.0),
    ];
    assert!(ok.iter().all(|&b| b));
}

#[test]
fn c5_current_heuristic_spread() {
    let kingston = diff("table4_sd_cards", Quantity::Energy, "sd_kingston", false);
    let ok = [
        pp_check("5 current", "swissbit", diff("table4_sd_cards", Quantity::Energy, "sd_swissbit", false), 66.9, 10.0),
        check("5 current", "kingston", kingston < 5.0, format!("{kingston:.2}% (target < 5%)")),
        pp_check("5 current", "sandisk", diff("table4_sd_cards", Quantity::Energy, "sd_sandisk", false), 10.9, 5.0),
    ];
    assert!(ok.iter().all(|&b| b));
}

#[test]
fn c6_sensor_energy_heuristic() {
    let e = suite().run("hih6130_pacer_e").unwrap();
    let t = suite().run("hih6130_pacer_t").unwrap();
    let lat = e.wait_latency_s.mean;
    let en = e.wait_energy_j.mean;
    let lat_gap = (t.wait_latency_s.mean - lat).abs() / lat * 100.0;
    let en_gap = (t.wait_energy_j.mean - en).abs() / en * 100.0;
    let ok = [
        check(
            "6 sensor",
            "pacer_e wait latency",
            (lat - 31.45e-3).abs() / 31.45e-3 <= 0.05,
            format!("{:.3} ms (target 31.45 ms +/- 5%)", lat * 1e3),
        ),
        check(
            "6 sensor",
            "pacer_e wait energy",
            (en - 240.29e-6).abs() / 240.29e-6 <= 0.05,
            format!("{:.2} uJ (target 240.29 uJ +/- 5%)", en * 1e6),
        ),
        check("6 sensor", "pacer_t latency gap", lat_gap <= 0.5, format!("{lat_gap:.3}% (<= 0.5%)")),
        check("6 sensor", "pacer_t energy gap", en_gap <= 4.3, format!("{en_gap:.3}% (<= 4.3%)")),
    ];
    assert!(ok.iter().all(|&b| b));
}

#[test]
fn c7_headline_claims() {
    let mut ok = true;
    for c in &suite().summary.checks {
        ok &= check(
            "7 headline",
            &c.name,
            c.value_pct >= c.threshold_pct,
            format!("{:.2}% (>= {}%) from {}", c.value_pct, c.threshold_pct, c.source),
        );
    }
    assert_eq!(suite().summary.checks.len(), 2);
    assert!(ok);
}

fn random_deterministic(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let wc = rng.random_range(1e-4..1.0);
    (wc, wc * rng.random_range(0.01..1.0))
}

#[test]
fn c8a_bisection_oracle_on_random_devices() {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let mut ok = true;
    for _ in 0..100 {
        let (wc, t_star) = random_deterministic(&mut rng);
        // Resolution far below any reachable width so every step is a plain bisection.
        let policy = DriftPolicy::new(wc * 1e-9, 2.0).unwrap();
        let mut search = SuccessiveApproximation::new(wc, policy).unwrap();
        let (mut lo, mut hi) = (0.0_f64, wc);
        for k in 1..=25 {
            let prev = search.bracket();
            let g = search.next_guess();
            let oracle_guess = 0.5 * (lo + hi);
            let v = if g >= t_star { Verdict::Pass } else { Verdict::Fail };
            search.record(g, v, None).unwrap();
            if oracle_guess >= t_star {
                hi = oracle_guess
            } else {
                lo = oracle_guess
            }
            let b = search.bracket();
            let nested = b.lower >= prev.lower && b.upper <= prev.upper;
            let bound = b.width() <= wc / 2f64.powi(k) + 4.0 * f64::EPSILON * wc;
            ok &= g == oracle_guess && b == Bracket { lower: lo, upper: hi } && nested && bound && b.contains(t_star);
        }
    }
    check("8 property", "nesting and bisection oracle (100 devices)", ok, "identical iterates, width <= W/2^k".into());
    assert!(ok);

    // Through the harness, fallback observations only ever tighten the bracket.
    let mut ok = true;
    for _ in 0..100 {
        let (wc, t_star) = random_deterministic(&mut rng);
        let mut cfg = ExperimentConfig::new(single_op_model(wc, CompletionDistribution::Deterministic { time: t_star }, 0.0), DetectorKind::PacerT);
        cfg.params.resolution = wc * 1e-6;
        cfg.model.sample_period = wc / 2000.0;
        cfg.poll_interval = wc / 100.0;
        let log = run_convergence_study(&cfg, 12).unwrap();
        for (k, r) in log.iter().enumerate() {
            let w = r.width_after.unwrap();
            ok &= w <= wc / 2f64.powi(k as i32 + 1) + 4.0 * f64::EPSILON * wc && r.passed;
        }
    }
    check("8 property", "harness widths halve (100 devices)", ok, "width after k trials <= W/2^k".into());
    assert!(ok);
}

#[test]
fn c8b_current_heuristic_respects_min_latency() {
    let mut rng = ChaCha8Rng::seed_from_u64(82);
    let mut violations = 0usize;
    let mut completions = 0usize;
    for _ in 0..100_000 {
        let idle = rng.random_range(1e-5..1e-1);
        let factor = rng.random_range(1.001..3.0);
        let min_latency = rng.random_range(0.0..2e-3);
        let state = CurrentHeuristicState::new(idle, factor, min_latency).unwrap();
        let n = rng.random_range(1..64);
        let dt = rng.random_range(1e-6..1e-4);
        for k in 0..n {
            let t = k as f64 * dt;
            let i = rng.random_range(0.0..3.0 * idle * factor);
            if state.step(i, t) == CompletionStatus::Complete {
                completions += 1;
                violations += (t < min_latency) as usize;
            }
        }
    }
    let ok = violations == 0 && completions > 0;
    check(
        "8 property",
        "current heuristic gate (1e5 streams)",
        ok,
        format!("{violations} early completions out of {completions}"),
    );
    assert!(ok);
}

fn random_trace(rng: &mut ChaCha8Rng, n: usize) -> CurrentTrace {
    let samples = (0..n)
        .map(|_| Sample {
            voltage: rng.random_range(0.0..5.0),
            current: rng.random_range(-1e-3..0.2),
            state: DeviceState::ALL[rng.random_range(0..4)],
        })
        .collect();
    CurrentTrace::new(rng.random_range(1e-7..1e-5), samples).unwrap()
}

#[test]
fn c8c_energy_integral_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(83);
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let t = random_trace(&mut rng, 100_000);
        let a = rng.random_range(0..t.len());
        let b = rng.random_range(a..=t.len());
        let got = energy_integrate(&t, a..b).unwrap();
        let mut oracle = 0.0;
        for s in &t.samples()[a..b] {
            oracle += s.voltage * s.current * t.sample_period();
        }
        if oracle != 0.0 {
            worst = worst.max(((got - oracle) / oracle).abs());
        }
    }
    let ok = worst <= 1e-9;
    check("8 property", "energy integral vs brute force", ok, format!("worst relative error {worst:.2e} (<= 1e-9)"));
    assert!(ok);
}

#[test]
fn c8d_voltage_scaling_is_bilinear() {
    let mut rng = ChaCha8Rng::seed_from_u64(84);
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let nominal = rng.random_range(1.0..5.0);
        // Traces are recorded at the nominal rail.
        let raw = random_trace(&mut rng, 20_000);
        let samples = raw.samples().iter().map(|s| Sample { voltage: nominal, ..*s }).collect();
        let t = CurrentTrace::new(raw.sample_period(), samples).unwrap();
        let policy = IodvsPolicy {
            nominal_voltage: nominal,
            wait_voltage: nominal * rng.random_range(0.3..1.0),
            wait_current_scale: rng.random_range(0.3..1.0),
            transition_energy: 0.0,
        };
        let before = energy_by_state(&t).wait;
        let after = energy_by_state(&apply_iodvs(&t, &policy)).wait;
        let expected = before * policy.wait_voltage / policy.nominal_voltage * policy.wait_current_scale;
        worst = worst.max(((after - expected) / expected).abs());
    }
    let ok = worst <= 1e-9;
    check("8 property", "IODVS wait-energy bilinearity", ok, format!("worst relative error {worst:.2e} (<= 1e-9)"));
    assert!(ok);
}

fn single_op_model(wc: f64, completion: CompletionDistribution, noise: f64) -> DeviceModel {
    let spec = OperationSpec {
        worst_case_wait: wc,
        completion,
        active_duration: wc / 20.0,
        verify_duration: wc / 20.0,
        active_current: 5e-3,
        wait_current: 8e-3,
        verify_current: 5e-3,
        wait_shape: WaitShape::Stepped { miss_current: None },
        noise_stddev: noise,
        poll_current: 1e-3,
    };
    DeviceModel {
        name: "random".into(),
        description: String::new(),
        supply_voltage: 3.3,
        idle_current: 1e-3,
        idle_prefix: wc / 50.0,
        host_quantum: 0.0,
        sample_period: 1e-6,
        control: ControlBaseline::WorstCase,
        operations: [("op".to_string(), spec)].into(),
        mix: vec![MixEntry { op: "op".into(), count: 1 }],
        iodvs: Some(IodvsPolicy::new(3.3, 2.5).unwrap()),
        targets: ControlTargets::default(),
    }
}

fn random_model(rng: &mut ChaCha8Rng) -> DeviceModel {
    let wc = rng.random_range(0.5e-3..8e-3);
    let completion = match rng.random_range(0..3) {
        0 => CompletionDistribution::Deterministic { time: wc * rng.random_range(0.05..1.0) },
        1 => CompletionDistribution::Normal {
            mean: wc * rng.random_range(0.1..0.9),
            stddev: wc * rng.random_range(0.0..0.4),
        },
        _ => CompletionDistribution::Bimodal {
            hit: wc * rng.random_range(0.05..0.4),
            miss: wc * rng.random_range(0.5..1.2),
            miss_probability: rng.random_range(0.0..1.0),
        },
    };
    let mut m = single_op_model(wc, completion, rng.random_range(0.0..0.5e-3));
    m.host_quantum = rng.random_range(0.0..0.1e-3);
    m.control = if rng.random_bool(0.5) { ControlBaseline::WorstCase } else { ControlBaseline::Median };
    let spec = m.operations.get_mut("op").unwrap();
    spec.wait_shape = match rng.random_range(0..4) {
        0 => WaitShape::Constant,
        1 => WaitShape::Stepped { miss_current: None },
        2 => WaitShape::Stepped { miss_current: Some(20e-3) },
        _ => WaitShape::Decaying { peak_current: 15e-3, time_constant: wc / 5.0 },
    };
    m
}

#[test]
fn c8e_every_trial_verifies() {
    let mut rng = ChaCha8Rng::seed_from_u64(85);
    let mut trials = 0usize;
    let mut failures = 0usize;
    let mut extended = 0usize;
    for i in 0..40 {
        let model = random_model(&mut rng);
        for kind in [DetectorKind::Control, DetectorKind::PacerT, DetectorKind::PacerE, DetectorKind::PacerC] {
            let mut cfg = ExperimentConfig::new(model.clone(), kind);
            cfg.trials = 20;
            cfg.warmup = 5;
            cfg.seed = i;
            if rng.random_bool(0.5) {
                cfg = cfg.with_model_iodvs().unwrap();
            }
            if rng.random_bool(0.3) {
                cfg.drift = DriftSchedule::step(10, rng.random_range(0.7..1.4));
            }
            let r = run_experiment(&cfg).unwrap();
            trials += r.trial_results.len();
            failures += r.trial_results.iter().filter(|t| !t.passed).count() + r.verification_failures;
            extended += r.fail_extensions_total;
            for t in &r.trial_results {
                assert!(t.all_energy >= t.wait_energy && t.all_latency >= t.wait_latency);
            }
        }
    }
    failures += suite().summary.verification_failures;
    let ok = failures == 0 && extended > 0;
    check(
        "8 property",
        "safety over randomized corpus",
        ok,
        format!("{failures} failed read-backs in {trials} trials ({extended} needed fallback polling) plus the full suite"),
    );
    assert!(ok);
}

#[test]
fn c8f_reports_are_byte_identical() {
    let mut cfg = ExperimentConfig::new(builtin_model("sd_swissbit").unwrap(), DetectorKind::PacerC);
    cfg.seed = 42;
    let a = run_experiment(&cfg).unwrap().to_json().unwrap();
    let b = run_experiment(&cfg).unwrap().to_json().unwrap();
    let s1 = serde_json::to_string(&run_suite(9).unwrap()).unwrap();
    let s2 = serde_json::to_string(&run_suite(9).unwrap()).unwrap();
    let ok = a == b && s1 == s2;
    check("8 property", "reproducible reports", ok, format!("experiment {} bytes, suite {} bytes", a.len(), s1.len()));
    assert!(ok);
}

#[test]
fn c9_drift_reconvergence() {
    let model = builtin_model("eeprom").unwrap();
    let q = model.host_quantum;
    let mut cfg = ExperimentConfig::new(model, DetectorKind::PacerT);
    cfg.drift = DriftSchedule::step(25, 1.15);
    let log = run_convergence_study(&cfg, 50).unwrap();
    let failures = log.iter().filter(|r| !r.passed).count();
    let after: Vec<_> = log.iter().filter(|r| r.trial >= 25).collect();
    let new_true = after[0].true_completion;
    let close = |r: &&pacer_core::harness::IterateRecord| {
        r.verdict == Verdict::Pass && ((r.guess.unwrap() + q) - new_true).abs() / new_true <= 0.02
    };
    // First trial from which every later prediction stays within 2%.
    let settled_at = (0..after.len()).find(|&i| after[i..].iter().all(close)).map(|i| i + 1);
    let widened = after.iter().any(|r| r.widened.is_some());
    let ok = failures == 0 && widened && settled_at.is_some_and(|n| n <= 20);
    check(
        "9 drift",
        "eeprom +15% step",
        ok,
        format!(
            "re-converged after {} trials (<= 20), {failures} verification failures, widened: {widened}",
            settled_at.map_or("never".to_string(), |n| n.to_string())
        ),
    );
    assert!(ok);
}
