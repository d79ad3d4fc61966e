//! `pacer`: run experiments, reproduce the result tables, calibrate models,
//! export simulated traces and analyse captured ones.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pacer_core::detectors::{CompletionStatus, CurrentHeuristicState, DEFAULT_THRESHOLD_FACTOR};
use pacer_core::devices::{builtin_model, builtin_models, simulate_operation, DeviceModel, BUILTIN_NAMES};
use pacer_core::harness::{calibrate, compare_reports, run_experiment, run_suite, DetectorKind, ExperimentConfig};
use pacer_core::trace::{self, DeviceState, MovingAverageFilter, DEFAULT_FILTER_WINDOW};
use pacer_core::{energy_by_state, Error};
use serde::{Deserialize, Serialize};

const EXIT_USAGE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_ASSERT: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "pacer", version, about = "Early-completion detection for peripheral operations")]
struct Cli {
    /// Override the RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, short, global = true, env = "PACER_OUTPUT_DIR")]
    output: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// List builtin device models.
    ListDevices {
        /// Also write each model as a TOML model file into this directory.
        #[arg(long)]
        export_dir: Option<PathBuf>,
    },
    /// Run one experiment and compare it against the device's control baseline.
    Run {
        #[arg(long, short)]
        config: PathBuf,
        /// Formats to write; both by default.
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// Run every device table and the headline checks.
    Suite {
        /// Exit with status 3 if a headline check fails.
        #[arg(long)]
        assert: bool,
    },
    /// Check a model's control baseline against its stored targets.
    Calibrate {
        /// Builtin device name.
        #[arg(long, conflicts_with = "model_file")]
        device: Option<String>,
        #[arg(long)]
        model_file: Option<PathBuf>,
    },
    /// Simulate one operation and write its trace as CSV.
    ExportTrace {
        #[arg(long)]
        device: String,
        /// Operation name; defaults to the first in the device's mix.
        #[arg(long)]
        op: Option<String>,
        /// Host wait in milliseconds; defaults to the worst case plus host latency.
        #[arg(long)]
        delay_ms: Option<f64>,
        /// Trace file to write (a `.meta.json` sidecar with ground truth is written next to it).
        #[arg(long)]
        trace: PathBuf,
    },
    /// Run the current heuristic offline over a trace CSV.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD_FACTOR)]
        threshold_factor: f64,
        #[arg(long, default_value_t = 0.0)]
        min_latency_ms: f64,
        #[arg(long, default_value_t = DEFAULT_FILTER_WINDOW)]
        filter_window: usize,
        /// Idle current reference; measured from the trace's idle samples when omitted.
        #[arg(long)]
        idle_current_ma: Option<f64>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Invalid(Error),
    Assertion(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Invalid(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Invalid(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Invalid(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INVALID)
        }
        Err(Failure::Assertion(msg)) => {
            eprintln!("assertion failed: {msg}");
            ExitCode::from(EXIT_ASSERT)
        }
    }
}

fn dispatch(cli: Cli) -> CmdResult {
    let out_dir = cli.output.clone().unwrap_or_else(|| PathBuf::from("."));
    match cli.command {
        Command::ListDevices { export_dir } => cmd_list_devices(export_dir.as_deref()),
        Command::Run { config, format } => cmd_run(&config, &out_dir, format, cli.seed),
        Command::Suite { assert } => cmd_suite(&out_dir, assert, cli.seed),
        Command::Calibrate { device, model_file } => cmd_calibrate(device, model_file, cli.seed),
        Command::ExportTrace { device, op, delay_ms, trace } => cmd_export_trace(&device, op, delay_ms, &trace, cli.seed),
        Command::Analyze { trace, threshold_factor, min_latency_ms, filter_window, idle_current_ma } => {
            cmd_analyze(&trace, threshold_factor, min_latency_ms * 1e-3, filter_window, idle_current_ma.map(|v| v * 1e-3))
        }
    }
}

/// Writes through a temporary file in the destination directory, then renames.
fn write_atomic(path: &Path, contents: &[u8]) -> CmdResult {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Failure::Invalid(e.error.into()))?;
    Ok(())
}

fn cmd_list_devices(export_dir: Option<&Path>) -> CmdResult {
    for m in builtin_models() {
        let ops: Vec<String> = m
            .operations
            .iter()
            .map(|(name, o)| format!("{name} (worst case {:.3} ms)", o.worst_case_wait * 1e3))
            .collect();
        println!("{:<12} {}: {}", m.name, m.description, ops.join(", "));
        if let Some(dir) = export_dir {
            write_atomic(&dir.join(format!("{}.toml", m.name)), m.to_toml_string()?.as_bytes())?;
        }
    }
    Ok(())
}

fn cmd_run(config: &Path, out_dir: &Path, format: Option<Format>, seed: Option<u64>) -> CmdResult {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let report = run_experiment(&cfg)?;
    let mut control_cfg = cfg.clone();
    control_cfg.detector = DetectorKind::Control;
    control_cfg.iodvs = None;
    control_cfg.drift = Default::default();
    let control = run_experiment(&control_cfg)?;
    let diff = compare_reports(&report, &control)?;

    let stem = config.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    if format != Some(Format::Csv) {
        write_atomic(&out_dir.join(format!("{stem}.json")), report.to_json()?.as_bytes())?;
    }
    if format != Some(Format::Json) {
        write_atomic(&out_dir.join(format!("{stem}.csv")), diff.to_csv().as_bytes())?;
    }
    print!("{diff}");
    if report.fail_extensions_total > 0 {
        println!("fallback polling engaged in {} of {} trials", report.fail_extensions_total, report.trials);
    }
    for w in &report.warnings {
        println!("warning: {w}");
    }
    Ok(())
}

fn cmd_suite(out_dir: &Path, assert: bool, seed: Option<u64>) -> CmdResult {
    let suite = run_suite(seed.unwrap_or(1))?;
    for (stem, table) in &suite.tables {
        write_atomic(&out_dir.join(format!("{stem}.csv")), table.to_csv().as_bytes())?;
        println!("{table}");
    }
    write_atomic(&out_dir.join("suite.json"), serde_json::to_string_pretty(&suite)?.as_bytes())?;
    let mut summary = String::from("check,value_pct,threshold_pct,passed,source\n");
    for c in &suite.summary.checks {
        summary.push_str(&format!("{},{:.2},{:.1},{},{}\n", c.name, c.value_pct, c.threshold_pct, c.passed, c.source));
        println!(
            "{:<32} {:>6.1}% (>= {:.0}%) {}  [{}]",
            c.name,
            c.value_pct,
            c.threshold_pct,
            if c.passed { "PASS" } else { "FAIL" },
            c.source
        );
    }
    write_atomic(&out_dir.join("summary.csv"), summary.as_bytes())?;
    println!("verification failures: {}", suite.summary.verification_failures);
    if assert && !suite.summary.passed {
        let failed: Vec<&str> = suite.summary.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        return Err(Failure::Assertion(if failed.is_empty() {
            "verification failures present".to_string()
        } else {
            failed.join(", ")
        }));
    }
    Ok(())
}

fn cmd_calibrate(device: Option<String>, model_file: Option<PathBuf>, seed: Option<u64>) -> CmdResult {
    let model = match (device, model_file) {
        (Some(name), None) => builtin_model(&name)?,
        (None, Some(path)) => DeviceModel::load(&path)?,
        _ => {
            return Err(Failure::Usage(format!(
                "pass --device <name> or --model-file <path> (builtin: {})",
                BUILTIN_NAMES.join(", ")
            )))
        }
    };
    let cal = calibrate(&model, seed.unwrap_or(1))?;
    println!("{}", cal.device);
    for r in &cal.rows {
        println!(
            "  {:<16} target {:>10.2}  measured {:>10.2}  {:>+6.2}%  {}",
            r.quantity,
            r.target,
            r.measured,
            r.deviation_pct,
            if r.within_tolerance { "ok" } else { "OUT OF TOLERANCE" }
        );
    }
    if cal.rows.is_empty() {
        println!("  no stored targets");
    }
    Ok(())
}

/// Ground truth written next to an exported trace.
#[derive(Debug, Serialize, Deserialize)]
struct TraceMeta {
    device: String,
    op: String,
    seed: u64,
    host_delay_s: f64,
    wait_start_s: f64,
    true_completion_time_s: f64,
    idle_current_a: f64,
    energy_by_state_j: pacer_core::EnergyByState,
}

fn meta_path(trace: &Path) -> PathBuf {
    let mut s = trace.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn cmd_export_trace(device: &str, op: Option<String>, delay_ms: Option<f64>, path: &Path, seed: Option<u64>) -> CmdResult {
    let model = builtin_model(device)?;
    let op = op.unwrap_or_else(|| model.mix[0].op.clone());
    let spec = model.operation(&op)?;
    let delay = match delay_ms {
        Some(d) => d * 1e-3,
        None => spec.worst_case_wait + model.host_quantum,
    };
    let seed = seed.unwrap_or(1);
    let outcome = simulate_operation(&model, &op, delay, seed)?;
    let mut buf = Vec::new();
    trace::write_csv(&outcome.trace, &mut buf)?;
    write_atomic(path, &buf)?;
    let meta = TraceMeta {
        device: model.name.clone(),
        op,
        seed,
        host_delay_s: delay,
        wait_start_s: outcome.trace.time_of(outcome.wait_start),
        true_completion_time_s: outcome.true_completion_time,
        idle_current_a: model.idle_current,
        energy_by_state_j: energy_by_state(&outcome.trace),
    };
    write_atomic(&meta_path(path), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    println!(
        "wrote {} samples to {} (true completion {:.4} ms after the wait starts)",
        outcome.trace.len(),
        path.display(),
        outcome.true_completion_time * 1e3
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct AnalysisReport {
    samples: usize,
    idle_current_a: f64,
    ict_a: f64,
    min_latency_s: f64,
    /// Seconds after the wait starts (or the trace starts, when it has no wait phase).
    detected_completion_s: Option<f64>,
    /// Time between detection and the end of the wait phase.
    slack_s: Option<f64>,
    ground_truth_s: Option<f64>,
    error_s: Option<f64>,
    energy_by_state_j: pacer_core::EnergyByState,
}

fn cmd_analyze(path: &Path, threshold: f64, min_latency: f64, window: usize, idle_override: Option<f64>) -> CmdResult {
    let file = fs::File::open(path)?;
    let trace = trace::read_csv(BufReader::new(file))?;
    let samples = trace.samples();
    let idle = match idle_override {
        Some(i) => i,
        None => {
            let idle: Vec<f64> = samples.iter().filter(|s| s.state == DeviceState::Idle).map(|s| s.current).collect();
            if idle.is_empty() {
                return Err(Failure::Usage("trace has no idle samples; pass --idle-current-ma".into()));
            }
            idle.iter().sum::<f64>() / idle.len() as f64
        }
    };
    let state = CurrentHeuristicState::new(idle, threshold, min_latency)?;
    let wait = trace.state_span(DeviceState::Wait);
    let (start, end) = match &wait {
        Some(r) => (r.start, r.end),
        None => (0, samples.len()),
    };
    let mut filter = MovingAverageFilter::new(window)?;
    let ts = trace.sample_period();
    let detected = samples[start..end].iter().enumerate().find_map(|(k, s)| {
        let t = k as f64 * ts;
        (state.step(filter.push(s.current), t) == CompletionStatus::Complete).then_some(t)
    });
    let ground_truth = fs::read_to_string(meta_path(path))
        .ok()
        .and_then(|text| serde_json::from_str::<TraceMeta>(&text).ok())
        .map(|m| m.true_completion_time_s);
    let report = AnalysisReport {
        samples: samples.len(),
        idle_current_a: idle,
        ict_a: state.ict,
        min_latency_s: min_latency,
        detected_completion_s: detected,
        slack_s: detected.map(|t| (end - start) as f64 * ts - t),
        ground_truth_s: ground_truth,
        error_s: detected.zip(ground_truth).map(|(d, g)| d - g),
        energy_by_state_j: energy_by_state(&trace),
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
