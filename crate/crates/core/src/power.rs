//! Energy accounting for worst-case waiting, signalled (polled) completion and
//! intra-operation voltage scaling of the wait phase.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{energy_integrate, CurrentTrace, DeviceState, Sample};

/// Switched-capacitance model of the host/peripheral link: `P = c f V_dd^2`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CommLink {
    /// Farads.
    pub capacitance: f64,
    /// Hertz.
    pub frequency: f64,
    /// Volts.
    pub vdd: f64,
}

impl CommLink {
    pub fn power(&self) -> f64 {
        self.capacitance * self.frequency * self.vdd * self.vdd
    }
}

/// Power drawn because the host is actively watching for completion.
///
/// None of these components were measured on a real fixture; the defaults are
/// order-of-magnitude placeholders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadModel {
    /// MCU core awake while polling, watts.
    pub mcu: f64,
    /// MCU communications driver, watts.
    pub mcd: f64,
    /// Cost of holding host and device on matched voltages, watts.
    pub matching: f64,
    /// Device-side communications driver, watts.
    pub device: f64,
    pub comm: CommLink,
}

impl Default for OverheadModel {
    fn default() -> Self {
        OverheadModel {
            mcu: 10e-3,
            mcd: 1e-3,
            matching: 0.5e-3,
            device: 0.5e-3,
            comm: CommLink {
                capacitance: 100e-12,
                frequency: 1e6,
                vdd: 3.3,
            },
        }
    }
}

impl OverheadModel {
    pub fn zero() -> Self {
        OverheadModel {
            mcu: 0.0,
            mcd: 0.0,
            matching: 0.0,
            device: 0.0,
            comm: CommLink::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [
            ("overhead.mcu", self.mcu),
            ("overhead.mcd", self.mcd),
            ("overhead.matching", self.matching),
            ("overhead.device", self.device),
            ("overhead.comm.capacitance", self.comm.capacitance),
            ("overhead.comm.frequency", self.comm.frequency),
            ("overhead.comm.vdd", self.comm.vdd),
        ];
        for (name, v) in parts {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(name, format!("{v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// `P_MCU + P_MCD + P_Comm + P_Match + P_Dev`, watts.
    pub fn total(&self) -> f64 {
        self.mcu + self.mcd + self.comm.power() + self.matching + self.device
    }
}

/// Voltage scaling applied while the device sits in its voltage-independent wait.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IodvsPolicy {
    pub nominal_voltage: f64,
    pub wait_voltage: f64,
    /// Device current at `wait_voltage` relative to nominal.
    pub wait_current_scale: f64,
    /// Energy charged per voltage transition into or out of the wait phase, joules.
    #[serde(default)]
    pub transition_energy: f64,
}

impl IodvsPolicy {
    pub fn new(nominal_voltage: f64, wait_voltage: f64) -> Result<Self> {
        let p = IodvsPolicy {
            nominal_voltage,
            wait_voltage,
            wait_current_scale: 1.0,
            transition_energy: 0.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nominal_voltage.is_finite() && self.nominal_voltage > 0.0) {
            return Err(Error::param("iodvs.nominal_voltage", format!("{} must be > 0", self.nominal_voltage)));
        }
        if !(self.wait_voltage > 0.0 && self.wait_voltage <= self.nominal_voltage) {
            return Err(Error::param(
                "iodvs.wait_voltage",
                format!("{} must lie in (0, {}]", self.wait_voltage, self.nominal_voltage),
            ));
        }
        if !(self.wait_current_scale > 0.0 && self.wait_current_scale <= 1.0) {
            return Err(Error::param(
                "iodvs.wait_current_scale",
                format!("{} must lie in (0, 1]", self.wait_current_scale),
            ));
        }
        if !(self.transition_energy.is_finite() && self.transition_energy >= 0.0) {
            return Err(Error::param("iodvs.transition_energy", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Factor by which wait-phase energy shrinks.
    pub fn wait_energy_ratio(&self) -> f64 {
        self.wait_voltage / self.nominal_voltage * self.wait_current_scale
    }

    #[inline]
    pub fn scale_sample(&self, s: Sample) -> Sample {
        if s.state == DeviceState::Wait {
            Sample {
                voltage: self.wait_voltage,
                current: s.current * self.wait_current_scale,
                state: s.state,
            }
        } else {
            s
        }
    }

    /// Surcharge for the regulator transitions in `trace`: one per entry into and
    /// one per exit from a wait run.
    pub fn transition_overhead(&self, trace: &CurrentTrace) -> f64 {
        if self.transition_energy == 0.0 {
            return 0.0;
        }
        let samples = trace.samples();
        let edges = samples
            .windows(2)
            .filter(|w| (w[0].state == DeviceState::Wait) != (w[1].state == DeviceState::Wait))
            .count();
        edges as f64 * self.transition_energy
    }
}

/// Wait-phase samples moved to the scaled rail; other states untouched.
pub fn apply_iodvs(trace: &CurrentTrace, policy: &IodvsPolicy) -> CurrentTrace {
    let samples = trace.samples().iter().map(|&s| policy.scale_sample(s)).collect();
    CurrentTrace::new(trace.sample_period(), samples).expect("sample period already validated")
}

/// Operation energy, slack energy and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergySplit {
    pub operation: f64,
    pub slack: f64,
    pub total: f64,
}

/// Energy spent when the host waits out the full worst case: the operation
/// itself over `[0, t_op)` plus the slack over `[t_op, t_slack_end)`.
pub fn worst_case_energy(trace: &CurrentTrace, t_op: f64, t_slack_end: f64) -> Result<EnergySplit> {
    let duration = trace.duration();
    let eps = trace.sample_period() * 1e-6;
    if !(t_op >= 0.0 && t_op <= t_slack_end && t_slack_end <= duration + eps) {
        return Err(Error::param(
            "t_op",
            format!("need 0 <= t_op ({t_op}) <= t_slack_end ({t_slack_end}) <= duration ({duration})"),
        ));
    }
    let op_end = trace.index_at(t_op);
    let slack_end = trace.index_at(t_slack_end);
    let operation = energy_integrate(trace, 0..op_end)?;
    let slack = energy_integrate(trace, op_end..slack_end)?;
    Ok(EnergySplit {
        operation,
        slack,
        total: operation + slack,
    })
}

/// Operation energy over `[0, t_op)` plus the polling overhead `P_overhead * t_op`.
pub fn signaled_energy(trace: &CurrentTrace, overhead: &OverheadModel, t_op: f64) -> Result<f64> {
    let duration = trace.duration();
    if !(t_op >= 0.0 && t_op <= duration + trace.sample_period() * 1e-6) {
        return Err(Error::param("t_op", format!("{t_op} outside [0, {duration}]")));
    }
    let op = energy_integrate(trace, 0..trace.index_at(t_op))?;
    Ok(op + overhead.total() * t_op)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_with(states: &[(DeviceState, usize, f64, f64)]) -> CurrentTrace {
        let mut samples = Vec::new();
        for &(state, n, v, i) in states {
            samples.extend(std::iter::repeat_n(Sample { voltage: v, current: i, state }, n));
        }
        CurrentTrace::new(1e-6, samples).unwrap()
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-300)
    }

    #[test]
    fn comm_power_formula() {
        let link = CommLink {
            capacitance: 100e-12,
            frequency: 1e6,
            vdd: 3.3,
        };
        assert!(close(link.power(), 1.089e-3, 1e-12));
    }

    #[test]
    fn constant_power_worst_case_split() {
        // 10 mW: 1 V at 10 mA for 5 ms.
        let t = trace_with(&[(DeviceState::Wait, 5000, 1.0, 0.010)]);
        let split = worst_case_energy(&t, 3e-3, 5e-3).unwrap();
        assert!(close(split.operation, 30e-6, 1e-12));
        assert!(close(split.slack, 20e-6, 1e-12));
        assert!(close(split.total, 50e-6, 1e-12));

        let none = worst_case_energy(&t, 4e-3, 4e-3).unwrap();
        assert_eq!(none.slack, 0.0);
        assert!(worst_case_energy(&t, 4e-3, 3e-3).is_err());
        assert!(worst_case_energy(&t, 1e-3, 6e-3).is_err());
    }

    #[test]
    fn zero_overhead_signaled_equals_operation_part() {
        let t = trace_with(&[(DeviceState::Active, 100, 3.3, 0.004), (DeviceState::Wait, 900, 3.3, 0.002)]);
        let sig = signaled_energy(&t, &OverheadModel::zero(), 0.6e-3).unwrap();
        let wc = worst_case_energy(&t, 0.6e-3, 1e-3).unwrap();
        assert!(close(sig, wc.operation, 1e-12));
    }

    #[test]
    fn signaled_can_exceed_worst_case() {
        // Operation 3 ms at 10 mW, slack 2 ms at 2 mW. Overhead at twice the
        // slack power over the 3 ms operation costs 12 uJ against 4 uJ of slack.
        let t = trace_with(&[(DeviceState::Wait, 3000, 1.0, 0.010), (DeviceState::Wait, 2000, 1.0, 0.002)]);
        let wc = worst_case_energy(&t, 3e-3, 5e-3).unwrap();
        let overhead = OverheadModel {
            mcu: 4e-3,
            ..OverheadModel::zero()
        };
        let sig = signaled_energy(&t, &overhead, 3e-3).unwrap();
        assert!(close(wc.total, 34e-6, 1e-12));
        assert!(close(sig, 42e-6, 1e-12));
        assert!(sig > wc.total);
    }

    #[test]
    fn identity_policy_is_identity() {
        let t = trace_with(&[(DeviceState::Idle, 10, 3.3, 0.001), (DeviceState::Wait, 10, 3.3, 0.003)]);
        let p = IodvsPolicy::new(3.3, 3.3).unwrap();
        assert_eq!(apply_iodvs(&t, &p), t);
    }

    #[test]
    fn wait_energy_scales_bilinearly() {
        let t = trace_with(&[
            (DeviceState::Active, 50, 3.3, 0.004),
            (DeviceState::Wait, 500, 3.3, 0.003),
            (DeviceState::Verify, 50, 3.3, 0.002),
        ]);
        let p = IodvsPolicy {
            nominal_voltage: 3.3,
            wait_voltage: 2.2,
            wait_current_scale: 0.8,
            transition_energy: 0.0,
        };
        let before = crate::trace::energy_by_state(&t);
        let scaled = apply_iodvs(&t, &p);
        let after = crate::trace::energy_by_state(&scaled);
        assert!(close(after.wait, before.wait * (2.2 / 3.3) * 0.8, 1e-9));
        assert_eq!(after.active, before.active);
        assert_eq!(after.verify, before.verify);
    }

    #[test]
    fn policy_validation() {
        assert!(IodvsPolicy::new(3.3, 0.0).is_err());
        assert!(IodvsPolicy::new(3.3, 3.4).is_err());
        let mut p = IodvsPolicy::new(3.3, 2.0).unwrap();
        p.wait_current_scale = 1.5;
        assert!(p.validate().is_err());
        let bad = OverheadModel {
            mcu: -1.0,
            ..OverheadModel::zero()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn transitions_counted_per_edge() {
        let t = trace_with(&[
            (DeviceState::Active, 5, 3.3, 0.004),
            (DeviceState::Wait, 5, 3.3, 0.003),
            (DeviceState::Verify, 5, 3.3, 0.002),
        ]);
        let p = IodvsPolicy {
            transition_energy: 1e-6,
            ..IodvsPolicy::new(3.3, 2.0).unwrap()
        };
        assert!(close(p.transition_overhead(&t), 2e-6, 1e-12));
    }
}
