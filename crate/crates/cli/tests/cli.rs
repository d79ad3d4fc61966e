use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn pacer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pacer"))
        .args(args)
        .env_remove("PACER_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_report_and_diff() {
    let dir = TempDir::new().unwrap();
    let cfg = configs().join("eeprom_pacer_t.toml");
    let o = pacer(&["run", "--config", cfg.to_str().unwrap(), "-o", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("eeprom_pacer_t.json")).unwrap()).unwrap();
    assert_eq!(report["device"], "eeprom");
    assert_eq!(report["verification_failures"], 0);
    let csv = fs::read_to_string(dir.path().join("eeprom_pacer_t.csv")).unwrap();
    let wait = csv.lines().find(|l| l.starts_with("latency,Wait")).expect("wait latency row");
    let diff: f64 = wait.rsplit(',').next().unwrap().parse().unwrap();
    assert!((diff - 30.5).abs() <= 3.0, "{diff}");
}

#[test]
fn run_honours_output_env_and_format() {
    let dir = TempDir::new().unwrap();
    let cfg = configs().join("eeprom_pacer_t.toml");
    let o = Command::new(env!("CARGO_BIN_EXE_pacer"))
        .args(["run", "--config", cfg.to_str().unwrap(), "--format", "json"])
        .env("PACER_OUTPUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("eeprom_pacer_t.json").exists());
    assert!(!dir.path().join("eeprom_pacer_t.csv").exists());
}

#[test]
fn seeded_runs_are_reproducible() {
    let cfg = configs().join("swissbit_pacer_c_iodvs.toml");
    let read = |dir: &TempDir| {
        let o = pacer(&["run", "-c", cfg.to_str().unwrap(), "--seed", "7", "-o", dir.path().to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(dir.path().join("swissbit_pacer_c_iodvs.json")).unwrap()
    };
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    assert_eq!(read(&a), read(&b));
}

#[test]
fn zero_trials_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "trials = 0\n[device]\nname = \"eeprom\"\n[detector]\nkind = \"pacer_t\"\n").unwrap();
    let o = pacer(&["run", "-c", cfg.to_str().unwrap(), "-o", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("trials"), "{}", stderr(&o));
    assert!(!dir.path().join("bad.json").exists());
}

#[test]
fn unknown_config_key_is_named() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("typo.toml");
    fs::write(&cfg, "[device]\nname = \"eeprom\"\n[detector]\nkind = \"pacer_t\"\nresolution = 3\n").unwrap();
    let o = pacer(&["run", "-c", cfg.to_str().unwrap(), "-o", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("resolution"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(pacer(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(pacer(&["run"]).status.code(), Some(1));
    assert_eq!(pacer(&["calibrate", "--device", "eeprom", "--model-file", "x.toml"]).status.code(), Some(1));
    assert_eq!(pacer(&["--help"]).status.code(), Some(0));
}

#[test]
fn suite_assert_passes_and_writes_tables() {
    let dir = TempDir::new().unwrap();
    let o = pacer(&["suite", "--assert", "-o", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}\n{}", stdout(&o), stderr(&o));
    for stem in ["table1_eeprom", "table2_nor_flash", "table3_nand_flash", "table4_sd_cards", "table5_hih6130"] {
        let csv = fs::read_to_string(dir.path().join(format!("{stem}.csv"))).unwrap();
        assert!(csv.starts_with("section,stage,control,pacer,diff_pct,pacer_iodvs,diff_iodvs_pct"), "{stem}");
    }
    assert!(dir.path().join("suite.json").exists());
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().filter(|l| l.contains(",true,")).count(), 2, "{summary}");
}

#[test]
fn calibrate_builtin_and_unknown() {
    let o = pacer(&["calibrate", "--device", "nand_flash"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("wait_latency_ms"));
    let o = pacer(&["calibrate", "--device", "floppy"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("floppy") && err.contains("eeprom") && err.contains("sd_kingston"), "{err}");
}

#[test]
fn exported_models_load_back() {
    let dir = TempDir::new().unwrap();
    let o = pacer(&["list-devices", "--export-dir", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("hih6130"));
    let file = dir.path().join("sd_lexar.toml");
    assert!(file.exists());
    let o = pacer(&["calibrate", "--model-file", file.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn analyze(trace: &Path, extra: &[&str]) -> Value {
    let mut args = vec!["analyze", "--trace", trace.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = pacer(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    serde_json::from_str(&stdout(&o)).unwrap()
}

#[test]
fn exported_trace_analyzes_near_ground_truth() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("swissbit.csv");
    let o = pacer(&["export-trace", "--device", "sd_swissbit", "--trace", trace.to_str().unwrap(), "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let meta: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("swissbit.csv.meta.json")).unwrap()).unwrap();

    let a = analyze(&trace, &[]);
    let truth = a["ground_truth_s"].as_f64().unwrap();
    assert_eq!(truth, meta["true_completion_time_s"].as_f64().unwrap());
    let error = a["error_s"].as_f64().unwrap();
    // Sample period is 10 us; two 50-sample windows.
    assert!((0.0..=2.0 * 50.0 * 10e-6).contains(&error), "error {error}");

    for state in ["idle", "active", "wait", "verify"] {
        let x = a["energy_by_state_j"][state].as_f64().unwrap();
        let y = meta["energy_by_state_j"][state].as_f64().unwrap();
        assert!((x - y).abs() <= 1e-9 * y.abs().max(1e-12), "{state}: {x} vs {y}");
    }
}

#[test]
fn idle_only_trace_completes_at_min_latency() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("idle.csv");
    let mut text = String::from("time_s,voltage_v,current_a,state\n");
    for k in 0..500 {
        text.push_str(&format!("{:.6e},3.3,0.002,wait\n", k as f64 * 1e-5));
    }
    fs::write(&trace, text).unwrap();
    let a = analyze(&trace, &["--idle-current-ma", "2", "--min-latency-ms", "1"]);
    let t = a["detected_completion_s"].as_f64().unwrap();
    assert!((t - 1e-3).abs() < 1e-9, "{t}");
}

#[test]
fn truncated_trace_reports_line() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("cut.csv");
    fs::write(&trace, "time_s,voltage_v,current_a,state\n0,3.3,0.002,idle\n1e-5,3.3,0.0\n").unwrap();
    let o = pacer(&["analyze", "--trace", trace.to_str().unwrap(), "--idle-current-ma", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}
