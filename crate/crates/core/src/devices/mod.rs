//! Simulated peripherals.
//!
//! A transaction is synthesized as four phases: an idle prefix (used by the
//! current heuristic to measure the idle level), the command/data phase, the
//! wait phase during which the host is waiting, and read-back verification.
//! The wait phase is as long as the host decides to wait; the device finishes
//! at its own drawn completion time somewhere inside or before that.

mod builtin;
mod file;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::power::IodvsPolicy;
use crate::trace::{CurrentTrace, DeviceState, Sample};

pub use crate::detectors::Verdict;
pub use builtin::{builtin_model, builtin_models, BUILTIN_NAMES};
pub use file::ModelFile;
pub(crate) use file::toml_key as file_toml_key;

/// Smallest completion time a draw is clamped to, seconds.
pub const MIN_COMPLETION: f64 = 1e-6;

const STREAM_DRAW: u64 = 0x6472_6177;
const STREAM_IDLE: u64 = 0x6964_6c65;
const STREAM_ACTIVE: u64 = 0x6163_7476;
const STREAM_WAIT: u64 = 0x7761_6974;
const STREAM_VERIFY: u64 = 0x7672_6679;

/// splitmix64 finalizer applied to `seed ^ stream`, for deriving independent RNG streams.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream))
}

/// Distribution of the actual completion time, seconds after the wait starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompletionDistribution {
    Deterministic { time: f64 },
    Normal { mean: f64, stddev: f64 },
    /// Cache hit at `hit`, miss at `miss` with probability `miss_probability`.
    Bimodal { hit: f64, miss: f64, miss_probability: f64 },
}

impl CompletionDistribution {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::param(name, format!("{v} must be > 0")))
            }
        };
        match *self {
            CompletionDistribution::Deterministic { time } => pos("completion.time", time),
            CompletionDistribution::Normal { mean, stddev } => {
                pos("completion.mean", mean)?;
                if !(stddev.is_finite() && stddev >= 0.0) {
                    return Err(Error::param("completion.stddev", format!("{stddev} must be >= 0")));
                }
                Ok(())
            }
            CompletionDistribution::Bimodal { hit, miss, miss_probability } => {
                pos("completion.hit", hit)?;
                pos("completion.miss", miss)?;
                if !(0.0..=1.0).contains(&miss_probability) {
                    return Err(Error::param(
                        "completion.miss_probability",
                        format!("{miss_probability} is outside [0, 1]"),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            CompletionDistribution::Deterministic { time } => time,
            CompletionDistribution::Normal { mean, .. } => mean,
            CompletionDistribution::Bimodal { hit, miss, miss_probability: p } => (1.0 - p) * hit + p * miss,
        }
    }

    /// Median before clamping. A bimodal split at exactly one half reports the hit time.
    pub fn median(&self) -> f64 {
        match *self {
            CompletionDistribution::Deterministic { time } => time,
            CompletionDistribution::Normal { mean, .. } => mean,
            CompletionDistribution::Bimodal { hit, miss, miss_probability } => {
                if miss_probability > 0.5 {
                    miss
                } else {
                    hit
                }
            }
        }
    }

    pub fn is_deterministic(&self) -> bool {
        match *self {
            CompletionDistribution::Deterministic { .. } => true,
            CompletionDistribution::Normal { stddev, .. } => stddev == 0.0,
            CompletionDistribution::Bimodal { hit, miss, miss_probability } => {
                hit == miss || miss_probability == 0.0 || miss_probability == 1.0
            }
        }
    }

    /// Raw draw and whether it came from the miss mode.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, bool) {
        match *self {
            CompletionDistribution::Deterministic { time } => (time, false),
            CompletionDistribution::Normal { mean, stddev } => {
                if stddev == 0.0 {
                    (mean, false)
                } else {
                    let n = Normal::new(mean, stddev).expect("validated stddev");
                    (n.sample(rng), false)
                }
            }
            CompletionDistribution::Bimodal { hit, miss, miss_probability } => {
                if rng.random_bool(miss_probability) {
                    (miss, true)
                } else {
                    (hit, false)
                }
            }
        }
    }
}

/// Current profile of the wait phase while the device is still busy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WaitShape {
    /// Flat at the wait current for the whole phase, with no visible completion.
    Constant,
    /// Flat at the wait current (or `miss_current` on a cache miss), dropping to idle at completion.
    Stepped { miss_current: Option<f64> },
    /// Starts at `peak_current` and decays toward the wait current with
    /// `time_constant`, dropping to idle at completion.
    Decaying { peak_current: f64, time_constant: f64 },
}

/// One operation a device can perform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationSpec {
    /// Manufacturer mandatory delay, seconds.
    pub worst_case_wait: f64,
    pub completion: CompletionDistribution,
    /// Command and data transfer, seconds.
    pub active_duration: f64,
    /// Read-back verification, seconds.
    pub verify_duration: f64,
    pub active_current: f64,
    pub wait_current: f64,
    pub verify_current: f64,
    pub wait_shape: WaitShape,
    pub noise_stddev: f64,
    /// Extra current the device draws while the host polls its status register.
    pub poll_current: f64,
}

impl OperationSpec {
    pub fn validate(&self) -> Result<()> {
        self.completion.validate()?;
        let checks: [(&'static str, f64); 8] = [
            ("worst_case_wait", self.worst_case_wait),
            ("active_duration", self.active_duration),
            ("verify_duration", self.verify_duration),
            ("active_current", self.active_current),
            ("wait_current", self.wait_current),
            ("verify_current", self.verify_current),
            ("noise_stddev", self.noise_stddev),
            ("poll_current", self.poll_current),
        ];
        for (name, v) in checks {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(name, format!("{v} must be finite and >= 0")));
            }
        }
        if self.worst_case_wait <= 0.0 {
            return Err(Error::param("worst_case_wait", "must be > 0"));
        }
        match self.wait_shape {
            WaitShape::Constant => {}
            WaitShape::Stepped { miss_current } => {
                if let Some(m) = miss_current {
                    if !(m.is_finite() && m >= 0.0) {
                        return Err(Error::param("wait_shape.miss_current", format!("{m} must be >= 0")));
                    }
                }
            }
            WaitShape::Decaying { peak_current, time_constant } => {
                if !(peak_current.is_finite() && peak_current >= 0.0) {
                    return Err(Error::param("wait_shape.peak_current", format!("{peak_current} must be >= 0")));
                }
                if !(time_constant.is_finite() && time_constant > 0.0) {
                    return Err(Error::param("wait_shape.time_constant", format!("{time_constant} must be > 0")));
                }
            }
        }
        Ok(())
    }

    /// Draws a completion time, scaled by `drift` and clamped to `[MIN_COMPLETION, worst_case_wait]`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, drift: f64) -> OperationDraw {
        let (raw, miss) = self.completion.sample(rng);
        let scaled = raw * drift;
        let completion = scaled.clamp(MIN_COMPLETION, self.worst_case_wait);
        OperationDraw {
            completion,
            miss,
            clamped: completion != scaled,
        }
    }

    /// Draw for the given seed, using the same stream [`simulate_operation`] uses.
    pub fn draw_seeded(&self, seed: u64, drift: f64) -> OperationDraw {
        self.draw(&mut rng_for(seed, STREAM_DRAW), drift)
    }

    /// Noise-free device current `t` seconds into the wait phase.
    pub fn wait_level(&self, idle_current: f64, draw: &OperationDraw, t: f64) -> f64 {
        match self.wait_shape {
            WaitShape::Constant => self.wait_current,
            _ if t >= draw.completion => idle_current,
            WaitShape::Stepped { miss_current } => match (draw.miss, miss_current) {
                (true, Some(m)) => m,
                _ => self.wait_current,
            },
            WaitShape::Decaying { peak_current, time_constant } => {
                self.wait_current + (peak_current - self.wait_current) * (-t / time_constant).exp()
            }
        }
    }
}

/// A realised completion time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperationDraw {
    /// Seconds after the wait starts.
    pub completion: f64,
    pub miss: bool,
    pub clamped: bool,
}

/// How the host baseline decides how long to wait.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlBaseline {
    /// Wait the manufacturer worst case.
    WorstCase,
    /// Wait the median completion time, then poll until the device reports completion.
    Median,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixEntry {
    pub op: String,
    pub count: u32,
}

/// Measured control-column values a model is calibrated against (SI units).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlTargets {
    pub wait_latency: Option<f64>,
    pub all_latency: Option<f64>,
    pub wait_energy: Option<f64>,
    pub all_energy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceModel {
    pub name: String,
    pub description: String,
    /// Nominal supply, volts.
    pub supply_voltage: f64,
    /// Current once the device has finished, amperes.
    pub idle_current: f64,
    /// Idle samples recorded before each transaction, seconds.
    pub idle_prefix: f64,
    /// Host scheduling latency added to every wait the host issues, seconds.
    pub host_quantum: f64,
    pub sample_period: f64,
    pub control: ControlBaseline,
    pub operations: BTreeMap<String, OperationSpec>,
    /// The transaction sequence one trial performs.
    pub mix: Vec<MixEntry>,
    /// Voltage-scaling policy calibrated for this device, if any.
    pub iodvs: Option<IodvsPolicy>,
    pub targets: ControlTargets,
}

impl DeviceModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.supply_voltage.is_finite() && self.supply_voltage > 0.0) {
            return Err(Error::param("supply_voltage", format!("{} must be > 0", self.supply_voltage)));
        }
        if !(self.idle_current.is_finite() && self.idle_current > 0.0) {
            return Err(Error::param(
                "idle_current",
                format!("{} must be > 0 so completion can be recognised", self.idle_current),
            ));
        }
        for (name, v) in [("idle_prefix", self.idle_prefix), ("host_quantum", self.host_quantum)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(name, format!("{v} must be >= 0")));
            }
        }
        if !(self.sample_period.is_finite() && self.sample_period > 0.0) {
            return Err(Error::param("sample_period", format!("{} must be > 0", self.sample_period)));
        }
        if self.operations.is_empty() {
            return Err(Error::param("operations", "a model needs at least one operation"));
        }
        for spec in self.operations.values() {
            spec.validate()?;
        }
        if self.mix.is_empty() {
            return Err(Error::param("mix", "a model needs at least one mix entry"));
        }
        for m in &self.mix {
            self.operation(&m.op)?;
            if m.count == 0 {
                return Err(Error::param("mix.count", format!("`{}` has count 0", m.op)));
            }
        }
        if let Some(p) = &self.iodvs {
            p.validate()?;
        }
        Ok(())
    }

    pub fn operation(&self, op: &str) -> Result<&OperationSpec> {
        self.operations.get(op).ok_or_else(|| Error::UnknownOperation {
            device: self.name.clone(),
            op: op.to_string(),
            available: self.operations.keys().cloned().collect::<Vec<_>>().join(", "),
        })
    }

    /// Operations of one trial, in order, with repeats expanded.
    pub fn expanded_mix(&self) -> impl Iterator<Item = &str> + '_ {
        self.mix
            .iter()
            .flat_map(|m| std::iter::repeat_n(m.op.as_str(), m.count as usize))
    }
}

/// What the host did during the wait phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HostSchedule {
    /// Length of the wait phase, seconds.
    pub wait: f64,
    /// Time from which the host was polling the status register, if it polled.
    pub polling_from: Option<f64>,
}

impl HostSchedule {
    pub fn fixed(wait: f64) -> Self {
        HostSchedule { wait, polling_from: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperationOutcome {
    pub trace: CurrentTrace,
    /// Ground truth, seconds after the wait phase starts.
    pub true_completion_time: f64,
    pub clamped: bool,
    pub miss: bool,
    /// Index of the first wait-phase sample.
    pub wait_start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PollStatus {
    Busy,
    Complete,
}

fn sample_count(duration: f64, period: f64) -> usize {
    (duration / period).round().max(0.0) as usize
}

fn noise_source(stddev: f64) -> Normal<f64> {
    Normal::new(0.0, stddev).expect("noise stddev validated")
}

/// Streaming generator for the wait phase, sample by sample.
///
/// The noise stream depends only on the seed, so a detector looking at this
/// stream sees exactly the prefix of the trace later synthesized for the same
/// seed.
#[derive(Debug, Clone)]
pub struct WaitSamples<'a> {
    spec: &'a OperationSpec,
    idle_current: f64,
    voltage: f64,
    period: f64,
    draw: OperationDraw,
    polling_from: Option<f64>,
    noise: Normal<f64>,
    rng: ChaCha8Rng,
    k: usize,
}

impl<'a> WaitSamples<'a> {
    pub fn new(model: &DeviceModel, spec: &'a OperationSpec, draw: OperationDraw, polling_from: Option<f64>, seed: u64) -> Self {
        WaitSamples {
            spec,
            idle_current: model.idle_current,
            voltage: model.supply_voltage,
            period: model.sample_period,
            draw,
            polling_from,
            noise: noise_source(spec.noise_stddev),
            rng: rng_for(seed, STREAM_WAIT),
            k: 0,
        }
    }

    /// Time of the next sample, seconds after the wait started.
    pub fn time(&self) -> f64 {
        self.k as f64 * self.period
    }
}

impl Iterator for WaitSamples<'_> {
    type Item = Sample;

    #[inline]
    fn next(&mut self) -> Option<Sample> {
        let t = self.time();
        let mut i = self.spec.wait_level(self.idle_current, &self.draw, t);
        if self.polling_from.is_some_and(|p| t >= p) {
            i += self.spec.poll_current;
        }
        if self.spec.noise_stddev > 0.0 {
            i += self.noise.sample(&mut self.rng);
        }
        self.k += 1;
        Some(Sample {
            voltage: self.voltage,
            current: i,
            state: DeviceState::Wait,
        })
    }
}

fn push_flat(trace: &mut CurrentTrace, n: usize, voltage: f64, level: f64, noise: f64, state: DeviceState, rng: &mut ChaCha8Rng) {
    let dist = noise_source(noise);
    for _ in 0..n {
        let i = if noise > 0.0 { level + dist.sample(rng) } else { level };
        trace.push(Sample { voltage, current: i, state });
    }
}

/// Mean raw current over the idle prefix the transaction for `seed` starts with.
///
/// Falls back to the model's nominal idle current when the prefix is empty.
pub fn measure_idle_current(model: &DeviceModel, spec: &OperationSpec, seed: u64) -> Result<f64> {
    let n = sample_count(model.idle_prefix, model.sample_period);
    if n == 0 {
        return Ok(model.idle_current);
    }
    let mut prefix = CurrentTrace::with_capacity(model.sample_period, n)?;
    push_flat(&mut prefix, n, model.supply_voltage, model.idle_current, spec.noise_stddev, DeviceState::Idle, &mut rng_for(seed, STREAM_IDLE));
    Ok(prefix.samples().iter().map(|s| s.current).sum::<f64>() / n as f64)
}

/// Synthesizes a full transaction for an already drawn completion time.
pub fn synthesize(model: &DeviceModel, spec: &OperationSpec, draw: OperationDraw, schedule: HostSchedule, seed: u64) -> Result<OperationOutcome> {
    if !(schedule.wait.is_finite() && schedule.wait >= 0.0) {
        return Err(Error::param("host_delay", format!("{} must be >= 0", schedule.wait)));
    }
    let ts = model.sample_period;
    let v = model.supply_voltage;
    let n_idle = sample_count(model.idle_prefix, ts);
    let n_active = sample_count(spec.active_duration, ts);
    let n_wait = sample_count(schedule.wait, ts);
    let n_verify = sample_count(spec.verify_duration, ts);
    let mut trace = CurrentTrace::with_capacity(ts, n_idle + n_active + n_wait + n_verify)?;

    push_flat(&mut trace, n_idle, v, model.idle_current, spec.noise_stddev, DeviceState::Idle, &mut rng_for(seed, STREAM_IDLE));
    push_flat(&mut trace, n_active, v, spec.active_current, spec.noise_stddev, DeviceState::Active, &mut rng_for(seed, STREAM_ACTIVE));
    let wait_start = trace.len();
    for s in WaitSamples::new(model, spec, draw, schedule.polling_from, seed).take(n_wait) {
        trace.push(s);
    }
    push_flat(&mut trace, n_verify, v, spec.verify_current, spec.noise_stddev, DeviceState::Verify, &mut rng_for(seed, STREAM_VERIFY));

    Ok(OperationOutcome {
        trace,
        true_completion_time: draw.completion,
        clamped: draw.clamped,
        miss: draw.miss,
        wait_start,
    })
}

/// Runs one operation with the host waiting `host_delay` seconds before verifying.
pub fn simulate_operation(model: &DeviceModel, op: &str, host_delay: f64, seed: u64) -> Result<OperationOutcome> {
    let spec = model.operation(op)?;
    let draw = spec.draw_seeded(seed, 1.0);
    synthesize(model, spec, draw, HostSchedule::fixed(host_delay), seed)
}

/// Status register as seen `t` seconds after the wait started.
pub fn poll_status(outcome: &OperationOutcome, t: f64) -> PollStatus {
    if t >= outcome.true_completion_time {
        PollStatus::Complete
    } else {
        PollStatus::Busy
    }
}

/// Read-back check after the host waited `issued_wait` seconds.
pub fn verify_operation(outcome: &OperationOutcome, issued_wait: f64) -> Verdict {
    verdict_for(outcome.true_completion_time, issued_wait)
}

pub(crate) fn verdict_for(completion: f64, issued_wait: f64) -> Verdict {
    if issued_wait >= completion {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}
