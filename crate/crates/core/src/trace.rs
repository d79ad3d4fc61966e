//! Sampled voltage/current traces and the energy integrals computed over them.
//!
//! A [`CurrentTrace`] is uniformly sampled: sample `n` sits at exactly
//! `n * sample_period` seconds. Every sample carries the device state the
//! simulator (or the capture fixture) annotated it with, so energy can be
//! partitioned per state.

use std::collections::VecDeque;
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default capture rate is one megasample per second.
pub const DEFAULT_SAMPLE_PERIOD: f64 = 1e-6;

/// Default moving-average window, in samples.
pub const DEFAULT_FILTER_WINDOW: usize = 50;

/// Header line of the trace CSV format.
pub const CSV_HEADER: &str = "time_s,voltage_v,current_a,state";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceState {
    Idle,
    Active,
    Wait,
    Verify,
}

impl DeviceState {
    pub const ALL: [DeviceState; 4] = [
        DeviceState::Idle,
        DeviceState::Active,
        DeviceState::Wait,
        DeviceState::Verify,
    ];

    pub fn label(self) -> &'static str {
        match self {
            DeviceState::Idle => "idle",
            DeviceState::Active => "active",
            DeviceState::Wait => "wait",
            DeviceState::Verify => "verify",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for DeviceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for DeviceState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "idle" => Ok(DeviceState::Idle),
            "active" => Ok(DeviceState::Active),
            "wait" => Ok(DeviceState::Wait),
            "verify" => Ok(DeviceState::Verify),
            other => Err(format!(
                "unknown state `{other}` (expected idle|active|wait|verify)"
            )),
        }
    }
}

/// One sample of the supply rail feeding a peripheral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Volts.
    pub voltage: f64,
    /// Amperes. Raw captures may dip slightly below zero from noise.
    pub current: f64,
    pub state: DeviceState,
}

impl Sample {
    pub fn new(voltage: f64, current: f64, state: DeviceState) -> Result<Self> {
        if !voltage.is_finite() || voltage < 0.0 {
            return Err(Error::param("voltage", format!("{voltage} is not a finite non-negative value")));
        }
        if !current.is_finite() {
            return Err(Error::param("current", format!("{current} is not finite")));
        }
        Ok(Sample {
            voltage,
            current,
            state,
        })
    }

    #[inline]
    pub fn power(&self) -> f64 {
        instantaneous_power(self)
    }
}

/// `P = V * I` for a single sample, in watts.
#[inline]
pub fn instantaneous_power(s: &Sample) -> f64 {
    s.voltage * s.current
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// A uniformly sampled, state-annotated power trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentTrace {
    sample_period: f64,
    samples: Vec<Sample>,
}

impl CurrentTrace {
    pub fn new(sample_period: f64, samples: Vec<Sample>) -> Result<Self> {
        if !(sample_period.is_finite() && sample_period > 0.0) {
            return Err(Error::param(
                "sample_period",
                format!("{sample_period} must be a positive finite number of seconds"),
            ));
        }
        Ok(CurrentTrace {
            sample_period,
            samples,
        })
    }

    pub fn with_capacity(sample_period: f64, capacity: usize) -> Result<Self> {
        Self::new(sample_period, Vec::with_capacity(capacity))
    }

    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [Sample] {
        &mut self.samples
    }

    pub fn push(&mut self, sample: Sample) {
        self.samples.push(sample);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Time of sample `n`, in seconds.
    #[inline]
    pub fn time_of(&self, n: usize) -> f64 {
        n as f64 * self.sample_period
    }

    /// `N * T_s`.
    pub fn duration(&self) -> f64 {
        self.time_of(self.samples.len())
    }

    /// Index of the sample boundary closest to `t` seconds, clamped to `[0, N]`.
    pub fn index_at(&self, t: f64) -> usize {
        let n = (t / self.sample_period).round();
        if n <= 0.0 {
            0
        } else {
            (n as usize).min(self.samples.len())
        }
    }

    /// Sample-index range covered by `state`, if it occurs as one contiguous run.
    pub fn state_span(&self, state: DeviceState) -> Option<Range<usize>> {
        let start = self.samples.iter().position(|s| s.state == state)?;
        let len = self.samples[start..]
            .iter()
            .take_while(|s| s.state == state)
            .count();
        Some(start..start + len)
    }

    /// Number of samples labelled `state`.
    pub fn state_count(&self, state: DeviceState) -> usize {
        self.samples.iter().filter(|s| s.state == state).count()
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }
}

/// `sum V_n I_n T_s` over `range`, accumulated front to back with compensation.
pub fn energy_integrate(trace: &CurrentTrace, range: Range<usize>) -> Result<f64> {
    if range.start > range.end || range.end > trace.len() {
        return Err(Error::Range {
            range,
            len: trace.len(),
        });
    }
    let sum: CompensatedSum = trace.samples[range].iter().map(instantaneous_power).collect();
    Ok(sum.value() * trace.sample_period)
}

/// Energy per device state plus the total, in joules.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyByState {
    pub idle: f64,
    pub active: f64,
    pub wait: f64,
    pub verify: f64,
    pub total: f64,
}

impl EnergyByState {
    pub fn get(&self, state: DeviceState) -> f64 {
        match state {
            DeviceState::Idle => self.idle,
            DeviceState::Active => self.active,
            DeviceState::Wait => self.wait,
            DeviceState::Verify => self.verify,
        }
    }

    /// Energy of the transaction proper, i.e. everything but the idle lead-in.
    pub fn transaction(&self) -> f64 {
        self.active + self.wait + self.verify
    }
}

pub fn energy_by_state(trace: &CurrentTrace) -> EnergyByState {
    let mut parts = [CompensatedSum::new(); 4];
    for s in trace.samples() {
        parts[s.state.index()].add(instantaneous_power(s));
    }
    let ts = trace.sample_period;
    let [idle, active, wait, verify] = parts.map(|p| p.value() * ts);
    let total: CompensatedSum = [idle, active, wait, verify].into_iter().collect();
    EnergyByState {
        idle,
        active,
        wait,
        verify,
        total: total.value(),
    }
}

/// Streaming arithmetic-mean filter over the most recent `window` inputs.
///
/// Until the window fills, the output is the mean of everything seen so far.
#[derive(Debug, Clone)]
pub struct MovingAverageFilter {
    window: usize,
    buf: VecDeque<f64>,
    sum: f64,
    pushes: usize,
}

impl MovingAverageFilter {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::param("window", "moving-average window must be at least 1"));
        }
        Ok(MovingAverageFilter {
            window,
            buf: VecDeque::with_capacity(window),
            sum: 0.0,
            pushes: 0,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn push(&mut self, x: f64) -> f64 {
        if self.buf.len() == self.window {
            if let Some(old) = self.buf.pop_front() {
                self.sum -= old;
            }
        }
        self.buf.push_back(x);
        self.sum += x;
        self.pushes += 1;
        // Re-sum periodically so add/subtract rounding cannot drift over long captures.
        if self.pushes.is_multiple_of(65_536) {
            self.sum = self.buf.iter().sum();
        }
        self.mean()
    }

    pub fn mean(&self) -> f64 {
        if self.buf.is_empty() {
            0.0
        } else {
            self.sum / self.buf.len() as f64
        }
    }

    pub fn reset(&mut self) {
        self.buf.clear();
        self.sum = 0.0;
        self.pushes = 0;
    }
}

/// Same-length trace whose current channel is the moving average of `trace`'s.
pub fn filter_moving_average(trace: &CurrentTrace, window: usize) -> Result<CurrentTrace> {
    let mut filter = MovingAverageFilter::new(window)?;
    let samples = trace
        .samples
        .iter()
        .map(|s| Sample {
            current: filter.push(s.current),
            ..*s
        })
        .collect();
    CurrentTrace::new(trace.sample_period, samples)
}

/// Writes `trace` in the `time_s,voltage_v,current_a,state` CSV format.
///
/// Numbers use the shortest representation that parses back to the same `f64`.
pub fn write_csv<W: Write>(trace: &CurrentTrace, mut out: W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for (n, s) in trace.samples.iter().enumerate() {
        writeln!(
            out,
            "{:?},{:?},{:?},{}",
            trace.time_of(n),
            s.voltage,
            s.current,
            s.state
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a trace CSV. The sample period is inferred from the first two rows;
/// a single-row file gets [`DEFAULT_SAMPLE_PERIOD`].
pub fn read_csv<R: BufRead>(input: R) -> Result<CurrentTrace> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);

    let headers = reader.headers().map_err(csv_error)?.clone();
    let expected: Vec<&str> = CSV_HEADER.split(',').collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Parse {
            line: 1,
            reason: format!("expected header `{CSV_HEADER}`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }

    let mut times = Vec::new();
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| -> Result<f64> {
            let raw = record.get(i).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line,
                    reason: format!("column `{name}`: `{raw}` is not a finite number"),
                })
        };
        let t = field(0, "time_s")?;
        let voltage = field(1, "voltage_v")?;
        let current = field(2, "current_a")?;
        let state = record
            .get(3)
            .unwrap_or("")
            .parse::<DeviceState>()
            .map_err(|reason| Error::Parse { line, reason })?;
        if voltage < 0.0 {
            return Err(Error::Parse {
                line,
                reason: format!("column `voltage_v`: {voltage} is negative"),
            });
        }
        times.push((line, t));
        samples.push(Sample {
            voltage,
            current,
            state,
        });
    }

    let period = match times.as_slice() {
        [(_, t0), (_, t1), ..] => t1 - t0,
        _ => DEFAULT_SAMPLE_PERIOD,
    };
    if times.len() > 1 && (period.is_nan() || period <= 0.0) {
        return Err(Error::Parse {
            line: times[1].0,
            reason: "time_s must be strictly increasing".into(),
        });
    }
    if let Some(&(_, t0)) = times.first() {
        for (n, &(line, t)) in times.iter().enumerate() {
            let expected = t0 + n as f64 * period;
            if (t - expected).abs() > 1e-6 * period {
                return Err(Error::Parse {
                    line,
                    reason: format!(
                        "time_s {t} breaks uniform sampling (expected {expected} for period {period})"
                    ),
                });
            }
        }
    }
    CurrentTrace::new(period, samples)
}

fn csv_error(err: csv::Error) -> Error {
    let line = err.position().map_or(0, |p| p.line());
    Error::Parse {
        line,
        reason: err.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_trace(v: f64, i: f64, n: usize, state: DeviceState) -> CurrentTrace {
        CurrentTrace::new(1e-6, vec![Sample { voltage: v, current: i, state }; n]).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn power_is_product() {
        let s = |v, i| Sample { voltage: v, current: i, state: DeviceState::Idle };
        assert!((instantaneous_power(&s(3.3, 0.010)) - 0.033).abs() < 1e-15);
        assert_eq!(instantaneous_power(&s(0.0, 0.5)), 0.0);
        assert!((instantaneous_power(&s(1.8, 0.002)) - 0.0036).abs() < 1e-15);
    }

    #[test]
    fn constant_trace_energy_closed_form() {
        let t = constant_trace(3.3, 0.010, 1000, DeviceState::Wait);
        let e = energy_integrate(&t, 0..1000).unwrap();
        assert!(rel(e, 33e-6) < 1e-12, "{e}");
        assert_eq!(energy_integrate(&t, 10..10).unwrap(), 0.0);
    }

    #[test]
    fn out_of_bounds_range_is_an_error() {
        let t = constant_trace(3.3, 0.010, 10, DeviceState::Wait);
        assert!(matches!(energy_integrate(&t, 0..11), Err(Error::Range { .. })));
        #[allow(clippy::reversed_empty_ranges)]
        let backwards = 5..2;
        assert!(energy_integrate(&t, backwards).is_err());
    }

    #[test]
    fn single_state_and_even_split() {
        let t = constant_trace(1.8, 0.004, 500, DeviceState::Wait);
        let parts = energy_by_state(&t);
        assert!(rel(parts.wait, energy_integrate(&t, 0..500).unwrap()) < 1e-12);
        assert_eq!(parts.active, 0.0);

        let mut samples = vec![Sample { voltage: 3.3, current: 0.01, state: DeviceState::Active }; 400];
        samples.extend(vec![Sample { voltage: 3.3, current: 0.01, state: DeviceState::Verify }; 400]);
        let t = CurrentTrace::new(1e-6, samples).unwrap();
        let parts = energy_by_state(&t);
        assert!(rel(parts.active, parts.total / 2.0) < 1e-12);
        assert!(rel(parts.verify, parts.total / 2.0) < 1e-12);
    }

    #[test]
    fn zero_window_rejected() {
        assert!(MovingAverageFilter::new(0).is_err());
        let t = constant_trace(3.3, 0.01, 5, DeviceState::Idle);
        assert!(filter_moving_average(&t, 0).is_err());
    }

    #[test]
    fn window_one_is_identity() {
        let samples: Vec<Sample> = (0..100)
            .map(|n| Sample { voltage: 3.3, current: (n as f64 * 0.37).sin() * 1e-3, state: DeviceState::Wait })
            .collect();
        let t = CurrentTrace::new(1e-6, samples).unwrap();
        assert_eq!(filter_moving_average(&t, 1).unwrap(), t);
    }

    #[test]
    fn constant_input_passes_through() {
        let t = constant_trace(3.3, 0.0025, 300, DeviceState::Wait);
        let f = filter_moving_average(&t, 50).unwrap();
        for (a, b) in f.samples().iter().zip(t.samples()) {
            assert!((a.current - b.current).abs() <= 4.0 * f64::EPSILON * b.current);
        }
    }

    #[test]
    fn warm_up_uses_partial_window() {
        let mut f = MovingAverageFilter::new(3).unwrap();
        assert_eq!(f.push(3.0), 3.0);
        assert_eq!(f.push(6.0), 4.5);
        assert_eq!(f.push(9.0), 6.0);
        assert_eq!(f.push(12.0), 9.0);
    }

    #[test]
    fn step_response_reaches_target_after_one_window() {
        // Windowed-mean oracle: 0.99 mA first reached once at least 49.5 of the
        // last 50 samples are post-step, i.e. 50 samples after the step.
        let step_at = 200;
        let samples: Vec<Sample> = (0..400)
            .map(|n| Sample {
                voltage: 3.3,
                current: if n >= step_at { 1e-3 } else { 0.0 },
                state: DeviceState::Wait,
            })
            .collect();
        let t = CurrentTrace::new(1e-6, samples).unwrap();
        let f = filter_moving_average(&t, 50).unwrap();
        let first = f.samples().iter().position(|s| s.current >= 0.99e-3 * (1.0 - 1e-12)).unwrap();
        // Sample `step_at + 49` is the 50th post-step sample.
        assert_eq!(first, step_at + 49);
        assert!(f.samples()[step_at + 48].current < 0.99e-3);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let samples: Vec<Sample> = (0..257)
            .map(|n| Sample {
                voltage: 3.3 - n as f64 * 1e-4,
                current: 1e-3 * ((n as f64) * 0.731).cos() + 1.234_567_890_123_4e-3,
                state: DeviceState::ALL[n % 4],
            })
            .collect();
        let t = CurrentTrace::new(1e-6, samples).unwrap();
        let mut buf = Vec::new();
        write_csv(&t, &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.samples(), t.samples());
        assert!(rel(back.sample_period(), 1e-6) < 1e-9);
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let text = "time_s,voltage_v,current_a,state\n0,3.3,0.001,idle\n1e-6,3.3,abc,idle\n";
        match read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let truncated = "time_s,voltage_v,current_a,state\n0,3.3,0.001,idle\n1e-6,3.3\n";
        match read_csv(truncated.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let bad_state = "time_s,voltage_v,current_a,state\n0,3.3,0.001,sleeping\n";
        assert!(matches!(read_csv(bad_state.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let gap = "time_s,voltage_v,current_a,state\n0,3.3,0.001,idle\n1e-6,3.3,0.001,idle\n3e-6,3.3,0.001,idle\n";
        assert!(matches!(read_csv(gap.as_bytes()), Err(Error::Parse { line: 4, .. })));
        assert!(matches!(read_csv("t,v,i,s\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn non_positive_period_rejected() {
        assert!(CurrentTrace::new(0.0, vec![]).is_err());
        assert!(CurrentTrace::new(-1e-6, vec![]).is_err());
        assert!(CurrentTrace::new(f64::NAN, vec![]).is_err());
    }
}
