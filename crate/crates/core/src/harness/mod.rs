//! Closed-loop experiments.
//!
//! One trial performs every operation of the device's mix in order. For each
//! operation the detector decides when the host stops waiting, the host
//! verifies, and on a failed read-back it keeps polling the status register
//! until the device reports completion. Trials run strictly in sequence because
//! each one feeds the detector state of the next.

mod config;
mod report;
mod suite;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detectors::{
    CompletionStatus, CurrentHeuristicState, DetectorParams, EnergyHeuristic, FailObservation, TimingHeuristic,
    Verdict, WidenDirection,
};
use crate::devices::{
    measure_idle_current, mix_seed, synthesize, verdict_for, ControlBaseline, DeviceModel, HostSchedule, MixEntry,
    OperationDraw, OperationSpec, WaitSamples, WaitShape,
};
use crate::error::{Error, Result};
use crate::power::{apply_iodvs, IodvsPolicy, OverheadModel};
use crate::trace::{energy_by_state, DeviceState, MovingAverageFilter, Sample};

pub use config::{ExperimentFile, DEFAULT_POLL_INTERVAL};
pub use report::{
    compare_reports, diff_percent, device_table, BenchmarkReport, DiffRow, DiffTable, Quantity, Stage, Stat,
    TableRow, TableReport,
};
pub use suite::{calibrate, run_suite, Calibration, CalibrationRow, HeadlineCheck, SuiteReport, SuiteSummary};

pub const DEFAULT_TRIALS: usize = 50;
pub const DEFAULT_WARMUP: usize = 20;
/// Completion draws used to characterise a device's minimum latency.
pub const CHARACTERIZATION_DRAWS: usize = 50;
/// Fraction of the smallest characterised completion time used as minimum latency.
pub const MIN_LATENCY_FRACTION: f64 = 0.5;

const STREAM_CALIBRATION: u64 = 0xca11_b000;
const STREAM_CHARACTERIZE: u64 = 0xc4a2_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Control,
    PacerT,
    PacerE,
    PacerC,
}

impl DetectorKind {
    pub fn label(self) -> &'static str {
        match self {
            DetectorKind::Control => "control",
            DetectorKind::PacerT => "pacer_t",
            DetectorKind::PacerE => "pacer_e",
            DetectorKind::PacerC => "pacer_c",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            DetectorKind::Control => "Control",
            DetectorKind::PacerT => "PACER-T",
            DetectorKind::PacerE => "PACER-E",
            DetectorKind::PacerC => "PACER-C",
        }
    }
}

impl std::str::FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "control" => Ok(DetectorKind::Control),
            "pacer_t" => Ok(DetectorKind::PacerT),
            "pacer_e" => Ok(DetectorKind::PacerE),
            "pacer_c" => Ok(DetectorKind::PacerC),
            other => Err(Error::config(
                "detector.kind",
                format!("unknown detector `{other}` (expected control|pacer_t|pacer_e|pacer_c)"),
            )),
        }
    }
}

/// Completion times are multiplied by `scale` from trial `from_trial` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftStep {
    pub from_trial: usize,
    pub scale: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftSchedule {
    pub steps: Vec<DriftStep>,
}

impl DriftSchedule {
    pub fn step(from_trial: usize, scale: f64) -> Self {
        DriftSchedule {
            steps: vec![DriftStep { from_trial, scale }],
        }
    }

    pub fn scale_at(&self, trial: usize) -> f64 {
        self.steps
            .iter()
            .filter(|s| s.from_trial <= trial)
            .max_by_key(|s| s.from_trial)
            .map_or(1.0, |s| s.scale)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.steps {
            if !(s.scale.is_finite() && s.scale > 0.0) {
                return Err(Error::config("drift.scale", format!("{} must be > 0", s.scale)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: DeviceModel,
    pub mix: Vec<MixEntry>,
    pub detector: DetectorKind,
    pub params: DetectorParams,
    pub iodvs: Option<IodvsPolicy>,
    pub overhead: OverheadModel,
    pub trials: usize,
    pub warmup: usize,
    pub seed: u64,
    pub drift: DriftSchedule,
    /// Status-register polling period after a failed read-back, seconds.
    pub poll_interval: f64,
}

impl ExperimentConfig {
    /// Defaults for `model`: its own mix, 50 trials with 20 warm-up, no IODVS.
    pub fn new(model: DeviceModel, detector: DetectorKind) -> Self {
        ExperimentConfig {
            mix: model.mix.clone(),
            model,
            detector,
            params: DetectorParams::default(),
            iodvs: None,
            overhead: OverheadModel::default(),
            trials: DEFAULT_TRIALS,
            warmup: DEFAULT_WARMUP,
            seed: 1,
            drift: DriftSchedule::default(),
            poll_interval: DEFAULT_POLL_INTERVAL,
        }
    }

    /// Turns on the model's calibrated voltage-scaling policy.
    pub fn with_model_iodvs(mut self) -> Result<Self> {
        self.iodvs = Some(self.model.iodvs.ok_or_else(|| {
            Error::config("iodvs", format!("device `{}` has no calibrated IODVS policy", self.model.name))
        })?);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("trials", "must be at least 1"));
        }
        if self.warmup >= self.trials {
            return Err(Error::config(
                "warmup",
                format!("{} must be smaller than trials ({})", self.warmup, self.trials),
            ));
        }
        if !(self.poll_interval.is_finite() && self.poll_interval > 0.0) {
            return Err(Error::config("detector.poll_interval_us", "must be > 0"));
        }
        self.model.validate()?;
        if self.mix.is_empty() {
            return Err(Error::config("device.mix", "needs at least one operation"));
        }
        for m in &self.mix {
            self.model.operation(&m.op)?;
            if m.count == 0 {
                return Err(Error::config("device.mix.count", format!("`{}` has count 0", m.op)));
            }
        }
        self.params.validate().map_err(param_to_config("detector"))?;
        if let Some(p) = &self.iodvs {
            p.validate().map_err(param_to_config("iodvs"))?;
        }
        self.overhead.validate().map_err(param_to_config("overhead"))?;
        self.drift.validate()
    }

    fn expanded_mix(&self) -> Vec<&str> {
        self.mix
            .iter()
            .flat_map(|m| std::iter::repeat_n(m.op.as_str(), m.count as usize))
            .collect()
    }

    /// Mismatches between detector and device that are allowed but worth flagging.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for m in &self.mix {
            let Ok(spec) = self.model.operation(&m.op) else { continue };
            match self.detector {
                DetectorKind::PacerT | DetectorKind::PacerE if !spec.completion.is_deterministic() => out.push(format!(
                    "{} on `{}` with non-deterministic completion times: the search is expected to oscillate",
                    self.detector.label(),
                    m.op
                )),
                DetectorKind::PacerC if spec.wait_shape == WaitShape::Constant => out.push(format!(
                    "pacer_c on `{}` whose wait current never returns to idle: every trial runs to the worst case",
                    m.op
                )),
                _ => {}
            }
        }
        out
    }
}

fn param_to_config(section: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Parameter { name, reason } => Error::config(format!("{section}.{name}"), reason),
        other => other,
    }
}

/// One operation inside a trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationRecord {
    pub op: String,
    /// Detector prediction in its own units (seconds, or joules for the energy search).
    pub guess: Option<f64>,
    /// When the detector told the host to stop waiting, seconds into the wait.
    pub stop: f64,
    /// Stop time plus host latency: when the first read-back happened.
    pub issued: f64,
    /// When the wait actually ended (later than `issued` after a failed read-back).
    pub waited: f64,
    pub true_completion: f64,
    pub first_verdict: Verdict,
    pub final_verdict: Verdict,
    pub width_after: Option<f64>,
    pub widened: Option<WidenDirection>,
    pub clamped: bool,
    pub cutoff: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub drift_scale: f64,
    pub wait_latency: f64,
    pub all_latency: f64,
    pub wait_energy: f64,
    pub all_energy: f64,
    /// Host-side overhead energy while actively watching or polling, reported apart from device energy.
    pub host_energy: f64,
    /// Every operation passed its final read-back.
    pub passed: bool,
    /// At least one operation needed fallback polling.
    pub fail_extended: bool,
    pub clamped: bool,
    pub operations: Vec<OperationRecord>,
}

#[derive(Debug, Clone)]
enum OpDetector {
    Control,
    Timing(TimingHeuristic),
    Energy(EnergyHeuristic),
    Current { min_latency: f64 },
}

/// Detector state carried from one trial to the next.
#[derive(Debug, Clone)]
pub struct Experiment {
    cfg: ExperimentConfig,
    detectors: BTreeMap<String, OpDetector>,
    trial: usize,
}

fn scaled(policy: Option<&IodvsPolicy>, s: Sample) -> Sample {
    match policy {
        Some(p) => p.scale_sample(s),
        None => s,
    }
}

/// Smallest of `CHARACTERIZATION_DRAWS` seeded completion draws, times the latency fraction.
pub fn characterize_min_latency(spec: &OperationSpec, seed: u64) -> f64 {
    let smallest = (0..CHARACTERIZATION_DRAWS as u64)
        .map(|k| spec.draw_seeded(mix_seed(seed, k), 1.0).completion)
        .fold(f64::INFINITY, f64::min);
    MIN_LATENCY_FRACTION * smallest
}

/// Energy fed to the device during a wait of exactly the worst case, as the energy search measures it.
fn worst_case_wait_energy(cfg: &ExperimentConfig, spec: &OperationSpec, seed: u64) -> f64 {
    let model = &cfg.model;
    let draw = spec.draw_seeded(seed, 1.0);
    let n = (spec.worst_case_wait / model.sample_period).round() as usize;
    WaitSamples::new(model, spec, draw, None, seed)
        .take(n)
        .map(|s| {
            let s = scaled(cfg.iodvs.as_ref(), s);
            (s.voltage * s.current).max(0.0) * model.sample_period
        })
        .sum()
}

struct StopDecision {
    guess: Option<f64>,
    stop: f64,
    cutoff: bool,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut detectors = BTreeMap::new();
        for (i, entry) in cfg.mix.iter().enumerate() {
            if detectors.contains_key(&entry.op) {
                continue;
            }
            let spec = cfg.model.operation(&entry.op)?;
            let policy = cfg.params.drift_policy();
            let d = match cfg.detector {
                DetectorKind::Control => OpDetector::Control,
                DetectorKind::PacerT => OpDetector::Timing(TimingHeuristic::new(spec.worst_case_wait, policy)?),
                DetectorKind::PacerE => {
                    let seed = mix_seed(cfg.seed, STREAM_CALIBRATION + i as u64);
                    let ceiling = worst_case_wait_energy(&cfg, spec, seed);
                    // Express the time resolution as the energy the wait consumes over it.
                    let energy_policy = crate::detectors::DriftPolicy {
                        resolution: ceiling * policy.resolution / spec.worst_case_wait,
                        ..policy
                    };
                    OpDetector::Energy(EnergyHeuristic::new(ceiling, energy_policy)?)
                }
                DetectorKind::PacerC => OpDetector::Current {
                    min_latency: match cfg.params.min_latency {
                        Some(m) => m,
                        None => characterize_min_latency(spec, mix_seed(cfg.seed, STREAM_CHARACTERIZE + i as u64)),
                    },
                },
            };
            detectors.insert(entry.op.clone(), d);
        }
        Ok(Experiment { cfg, detectors, trial: 0 })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    /// Total widen events across every operation's search.
    pub fn widen_events(&self) -> u32 {
        self.detectors
            .values()
            .map(|d| match d {
                OpDetector::Timing(t) => t.widen_events(),
                OpDetector::Energy(e) => e.search().widen_events(),
                _ => 0,
            })
            .sum()
    }

    /// Minimum latency the current heuristic uses for `op`, if it is running.
    pub fn min_latency(&self, op: &str) -> Option<f64> {
        match self.detectors.get(op) {
            Some(OpDetector::Current { min_latency }) => Some(*min_latency),
            _ => None,
        }
    }

    /// Next timing prediction for `op`, if it runs the timing search.
    pub fn next_guess(&self, op: &str) -> Option<f64> {
        match self.detectors.get(op) {
            Some(OpDetector::Timing(t)) => Some(t.next_guess()),
            Some(OpDetector::Energy(e)) => Some(e.target()),
            _ => None,
        }
    }

    fn decide_stop(&mut self, op: &str, spec: &OperationSpec, draw: OperationDraw, seed: u64) -> Result<StopDecision> {
        let cfg = &self.cfg;
        let model = &cfg.model;
        let ts = model.sample_period;
        let cutoff_samples = (spec.worst_case_wait / ts).round() as usize;
        let detector = self.detectors.get_mut(op).expect("detector per mix op");
        Ok(match detector {
            OpDetector::Control => {
                let stop = match model.control {
                    ControlBaseline::WorstCase => spec.worst_case_wait,
                    ControlBaseline::Median => spec.completion.median().min(spec.worst_case_wait),
                };
                StopDecision { guess: None, stop, cutoff: false }
            }
            OpDetector::Timing(t) => {
                let g = t.next_guess();
                StopDecision { guess: Some(g), stop: g, cutoff: false }
            }
            OpDetector::Energy(e) => {
                e.begin_trial();
                let mut reached_at = None;
                for (k, s) in WaitSamples::new(model, spec, draw, None, seed).take(cutoff_samples).enumerate() {
                    if e.step(&scaled(cfg.iodvs.as_ref(), s), ts) {
                        reached_at = Some(k);
                        break;
                    }
                }
                match reached_at {
                    Some(k) => StopDecision { guess: Some(e.accumulator()), stop: (k + 1) as f64 * ts, cutoff: false },
                    None => StopDecision { guess: Some(e.accumulator()), stop: spec.worst_case_wait, cutoff: true },
                }
            }
            OpDetector::Current { min_latency } => {
                let idle = measure_idle_current(model, spec, seed)?;
                let state = CurrentHeuristicState::new(idle, cfg.params.threshold_factor, *min_latency)?;
                let mut filter = MovingAverageFilter::new(cfg.params.filter_window)?;
                let mut done_at = None;
                for (k, s) in WaitSamples::new(model, spec, draw, None, seed).take(cutoff_samples).enumerate() {
                    let i = filter.push(s.current);
                    if state.step(i, k as f64 * ts) == CompletionStatus::Complete {
                        done_at = Some(k);
                        break;
                    }
                }
                match done_at {
                    Some(k) => StopDecision { guess: None, stop: (k + 1) as f64 * ts, cutoff: false },
                    None => StopDecision { guess: None, stop: spec.worst_case_wait, cutoff: true },
                }
            }
        })
    }

    /// Energy the search would have accumulated by `t` seconds into the wait.
    fn energy_until(&self, spec: &OperationSpec, draw: OperationDraw, seed: u64, t: f64) -> f64 {
        let model = &self.cfg.model;
        let n = (t / model.sample_period).round() as usize;
        WaitSamples::new(model, spec, draw, None, seed)
            .take(n)
            .map(|s| {
                let s = scaled(self.cfg.iodvs.as_ref(), s);
                (s.voltage * s.current).max(0.0) * model.sample_period
            })
            .sum()
    }

    /// Runs the next trial and advances the detector state.
    pub fn run_trial(&mut self) -> Result<TrialResult> {
        let trial = self.trial;
        let drift = self.cfg.drift.scale_at(trial);
        let trial_seed = mix_seed(self.cfg.seed, trial as u64);
        let ops: Vec<String> = self.cfg.expanded_mix().into_iter().map(str::to_string).collect();
        let model = self.cfg.model.clone();
        let q = model.host_quantum;
        let ts = model.sample_period;
        let p_host = self.cfg.overhead.total();

        let mut result = TrialResult {
            trial,
            drift_scale: drift,
            wait_latency: 0.0,
            all_latency: 0.0,
            wait_energy: 0.0,
            all_energy: 0.0,
            host_energy: 0.0,
            passed: true,
            fail_extended: false,
            clamped: false,
            operations: Vec::with_capacity(ops.len()),
        };

        for (j, op) in ops.iter().enumerate() {
            let spec = model.operation(op)?;
            let seed = mix_seed(trial_seed, j as u64);
            let draw = spec.draw_seeded(seed, drift);
            let decision = self.decide_stop(op, spec, draw, seed)?;
            let issued = decision.stop + q;
            let first = verdict_for(draw.completion, issued);

            let (waited, polling_from) = match first {
                Verdict::Pass => (issued, None),
                Verdict::Fail => {
                    let k = ((draw.completion - issued) / self.cfg.poll_interval).ceil().max(1.0);
                    let mut done = issued + k * self.cfg.poll_interval;
                    // Guard against rounding leaving the final poll a hair early.
                    if done < draw.completion {
                        done += self.cfg.poll_interval;
                    }
                    (done, Some(issued))
                }
            };
            let final_verdict = verdict_for(draw.completion, waited);

            let mut width_after = None;
            let mut widened = None;
            let observation = polling_from.map(|_| (waited - self.cfg.poll_interval, waited));
            match self.detectors.get_mut(op.as_str()).expect("detector per mix op") {
                OpDetector::Timing(t) => {
                    let g = decision.guess.expect("timing guess");
                    let obs = observation.map(|(busy, done)| FailObservation {
                        last_busy: (busy - q).max(g),
                        completed: done - q,
                    });
                    let step = t.record(g, first, obs)?;
                    width_after = Some(step.width_after);
                    widened = step.widened;
                }
                OpDetector::Energy(_) => {
                    let g = decision.guess.expect("energy guess");
                    let obs = match observation {
                        Some((busy, done)) => {
                            let last_busy = self.energy_until(spec, draw, seed, busy - q).max(g);
                            let completed = self.energy_until(spec, draw, seed, done - q).max(last_busy);
                            Some(FailObservation { last_busy, completed })
                        }
                        None => None,
                    };
                    let OpDetector::Energy(e) = self.detectors.get_mut(op.as_str()).expect("detector per mix op")
                    else {
                        unreachable!()
                    };
                    let step = e.record(g, first, obs)?;
                    width_after = Some(step.width_after);
                    widened = step.widened;
                }
                OpDetector::Control | OpDetector::Current { .. } => {}
            }

            let schedule = HostSchedule { wait: waited, polling_from };
            let mut outcome = synthesize(&model, spec, draw, schedule, seed)?;
            if let Some(policy) = &self.cfg.iodvs {
                outcome.trace = apply_iodvs(&outcome.trace, policy);
            }
            let energy = energy_by_state(&outcome.trace);
            let transitions = self
                .cfg
                .iodvs
                .as_ref()
                .map_or(0.0, |p| p.transition_overhead(&outcome.trace));
            let n_wait = outcome.trace.state_count(DeviceState::Wait);
            let n_txn = n_wait
                + outcome.trace.state_count(DeviceState::Active)
                + outcome.trace.state_count(DeviceState::Verify);

            result.wait_latency += n_wait as f64 * ts;
            result.all_latency += n_txn as f64 * ts;
            result.wait_energy += energy.wait + transitions;
            result.all_energy += energy.transaction() + transitions;
            let watching = match self.cfg.detector {
                DetectorKind::PacerE | DetectorKind::PacerC => waited,
                _ => waited - issued,
            };
            result.host_energy += p_host * watching;
            result.passed &= final_verdict == Verdict::Pass;
            result.fail_extended |= first == Verdict::Fail;
            result.clamped |= draw.clamped;
            result.operations.push(OperationRecord {
                op: op.clone(),
                guess: decision.guess,
                stop: decision.stop,
                issued,
                waited,
                true_completion: draw.completion,
                first_verdict: first,
                final_verdict,
                width_after,
                widened,
                clamped: draw.clamped,
                cutoff: decision.cutoff,
            });
        }
        self.trial += 1;
        Ok(result)
    }

    pub fn run_trials(&mut self, n: usize) -> Result<Vec<TrialResult>> {
        (0..n).map(|_| self.run_trial()).collect()
    }
}

/// Runs every trial of `cfg` and summarises the post-warm-up ones.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<BenchmarkReport> {
    let mut exp = Experiment::new(cfg.clone())?;
    let trials = exp.run_trials(cfg.trials)?;
    Ok(BenchmarkReport::from_trials(cfg, trials, exp.widen_events()))
}

/// One row per operation per trial: what was predicted, what happened, how wide the bracket is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateRecord {
    pub trial: usize,
    pub op: String,
    pub guess: Option<f64>,
    pub issued: f64,
    pub true_completion: f64,
    pub verdict: Verdict,
    pub width_after: Option<f64>,
    pub widened: Option<WidenDirection>,
    pub passed: bool,
}

pub fn run_convergence_study(cfg: &ExperimentConfig, max_trials: usize) -> Result<Vec<IterateRecord>> {
    let mut cfg = cfg.clone();
    cfg.trials = max_trials.max(1);
    cfg.warmup = 0;
    let mut exp = Experiment::new(cfg)?;
    let mut log = Vec::new();
    for _ in 0..max_trials {
        let t = exp.run_trial()?;
        for r in t.operations {
            log.push(IterateRecord {
                trial: t.trial,
                op: r.op,
                guess: r.guess,
                issued: r.issued,
                true_completion: r.true_completion,
                verdict: r.first_verdict,
                width_after: r.width_after,
                widened: r.widened,
                passed: r.final_verdict == Verdict::Pass,
            });
        }
    }
    Ok(log)
}
