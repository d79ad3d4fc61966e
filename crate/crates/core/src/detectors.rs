//! Completion detectors.
//!
//! * [`TimingHeuristic`] learns the shortest safe delay by successive
//!   approximation: a passed read-back moves the upper bound down to the
//!   issued delay, a failed one moves the lower bound up to it.
//! * [`EnergyHeuristic`] runs the same search over the energy delivered to the
//!   device during the wait, multiply-accumulating `V * I * T_s` per sample.
//! * [`CurrentHeuristicState`] watches the filtered supply current and calls
//!   the operation complete once it is back within a factor of the idle level
//!   and a minimum latency has passed.
//!
//! The two searches keep a [`Bracket`] that always contains the true value
//! while the device is stationary. Once it is narrower than the configured
//! resolution the search settles and keeps issuing the upper bound, which is
//! the tightest value known to pass. A failure at that bound can only mean
//! the device drifted, so the bracket is re-opened upward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{Sample, DEFAULT_FILTER_WINDOW};

pub const DEFAULT_THRESHOLD_FACTOR: f64 = 1.10;
pub const DEFAULT_RESOLUTION: f64 = 10e-6;
pub const DEFAULT_WIDEN_FACTOR: f64 = 2.0;

/// Outcome of read-back verification after the host stopped waiting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompletionStatus {
    Ongoing,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WidenDirection {
    Up,
    Down,
}

/// What fallback polling revealed after a failed prediction, in the search's
/// own units: the last poll that still saw the device busy and the first poll
/// that saw it complete.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailObservation {
    pub last_busy: f64,
    pub completed: f64,
}

/// Closed interval `[lower, upper]` known to contain the completion value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub lower: f64,
    pub upper: f64,
}

impl Bracket {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && 0.0 <= lower && lower <= upper) {
            return Err(Error::param("bracket", format!("need 0 <= lower ({lower}) <= upper ({upper})")));
        }
        Ok(Bracket { lower, upper })
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    /// Narrows the bracket after issuing `guess`.
    ///
    /// Pass lowers the upper bound to `guess`; Fail raises the lower bound to
    /// it and, when polling reported when the device actually finished, pulls
    /// the upper bound down to that time (never below the new lower bound).
    pub fn update(self, guess: f64, verdict: Verdict, completed_on_fail: Option<f64>) -> Result<Self> {
        match verdict {
            Verdict::Pass => Ok(Bracket {
                lower: self.lower.min(guess),
                upper: self.upper.min(guess),
            }),
            Verdict::Fail => {
                if let Some(done) = completed_on_fail {
                    if done < guess {
                        return Err(Error::Contract(format!(
                            "completion observed at {done} but the prediction {guess} had already failed"
                        )));
                    }
                }
                let lower = self.lower.max(guess);
                let mut upper = self.upper.max(lower);
                if let Some(done) = completed_on_fail {
                    upper = upper.min(done).max(lower);
                }
                Ok(Bracket { lower, upper })
            }
        }
    }

    /// Re-opens the bracket after drift has been detected.
    ///
    /// Upward: the new lower bound is `floor` (a value the device is known to
    /// exceed) and the upper bound grows by `widen_factor` times the current
    /// width (at least one resolution step), capped at `ceiling`. If polling
    /// observed the real completion, the upper bound reaches at least that far.
    /// Downward: the lower bound drops by the same span, never below zero.
    pub fn widen(
        self,
        policy: &DriftPolicy,
        direction: WidenDirection,
        floor: f64,
        observed: Option<f64>,
        ceiling: f64,
    ) -> Self {
        let span = policy.widen_factor * self.width().max(policy.resolution);
        match direction {
            WidenDirection::Up => {
                let lower = floor.max(self.lower).min(ceiling);
                let upper = (self.upper + span).max(observed.unwrap_or(0.0)).min(ceiling).max(lower);
                Bracket { lower, upper }
            }
            WidenDirection::Down => Bracket {
                lower: (self.lower - span).max(0.0),
                upper: self.upper,
            },
        }
    }
}

/// Resolution and re-opening behaviour of the successive-approximation search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftPolicy {
    /// Bracket width below which the search is considered converged.
    pub resolution: f64,
    /// Multiple of the current width added when re-opening.
    pub widen_factor: f64,
    /// Re-open downward after this many consecutive passes at the settled
    /// bound. `None` never probes downward.
    pub downward_after: Option<u32>,
}

impl DriftPolicy {
    pub fn new(resolution: f64, widen_factor: f64) -> Result<Self> {
        let p = DriftPolicy {
            resolution,
            widen_factor,
            downward_after: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return Err(Error::param("resolution", format!("{} must be > 0", self.resolution)));
        }
        if !(self.widen_factor.is_finite() && self.widen_factor >= 1.0) {
            return Err(Error::param("widen_factor", format!("{} must be >= 1", self.widen_factor)));
        }
        if self.downward_after == Some(0) {
            return Err(Error::param("downward_after", "must be at least 1 when set"));
        }
        Ok(())
    }
}

/// One issued prediction and what came of it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchStep {
    pub guess: f64,
    pub verdict: Verdict,
    pub width_after: f64,
    pub widened: Option<WidenDirection>,
}

/// Adaptive successive-approximation search over a scalar in `[0, ceiling]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessiveApproximation {
    bracket: Bracket,
    ceiling: f64,
    policy: DriftPolicy,
    pass_streak: u32,
    widen_events: u32,
}

impl SuccessiveApproximation {
    pub fn new(ceiling: f64, policy: DriftPolicy) -> Result<Self> {
        policy.validate()?;
        if !(ceiling.is_finite() && ceiling > 0.0) {
            return Err(Error::param("ceiling", format!("{ceiling} must be > 0")));
        }
        Ok(SuccessiveApproximation {
            bracket: Bracket::new(0.0, ceiling)?,
            ceiling,
            policy,
            pass_streak: 0,
            widen_events: 0,
        })
    }

    pub fn bracket(&self) -> Bracket {
        self.bracket
    }

    pub fn ceiling(&self) -> f64 {
        self.ceiling
    }

    pub fn policy(&self) -> &DriftPolicy {
        &self.policy
    }

    pub fn widen_events(&self) -> u32 {
        self.widen_events
    }

    pub fn settled(&self) -> bool {
        self.bracket.width() < self.policy.resolution
    }

    /// Value to issue next: the midpoint while searching, the upper bound once settled.
    pub fn next_guess(&self) -> f64 {
        if self.settled() {
            self.bracket.upper
        } else {
            self.bracket.midpoint()
        }
    }

    /// Folds the verdict for `guess` into the search.
    pub fn record(
        &mut self,
        guess: f64,
        verdict: Verdict,
        observation: Option<FailObservation>,
    ) -> Result<SearchStep> {
        if let Some(obs) = observation {
            if obs.completed < guess {
                return Err(Error::Contract(format!(
                    "completion observed at {} but the prediction {guess} had already failed",
                    obs.completed
                )));
            }
        }
        let mut widened = None;
        match verdict {
            Verdict::Fail => {
                self.pass_streak = 0;
                // Busy at or beyond the upper bound: the bracket no longer holds.
                let known_busy = observation.map_or(guess, |o| o.last_busy.max(guess));
                if known_busy >= self.bracket.upper {
                    self.bracket = self.bracket.widen(
                        &self.policy,
                        WidenDirection::Up,
                        known_busy,
                        observation.map(|o| o.completed),
                        self.ceiling,
                    );
                    self.widen_events += 1;
                    widened = Some(WidenDirection::Up);
                } else {
                    self.bracket = self.bracket.update(guess, verdict, observation.map(|o| o.completed))?;
                }
            }
            Verdict::Pass => {
                let at_bound = self.settled() && guess >= self.bracket.upper;
                self.pass_streak = if at_bound { self.pass_streak + 1 } else { 0 };
                match self.policy.downward_after {
                    Some(n) if self.pass_streak >= n => {
                        self.bracket = self.bracket.widen(&self.policy, WidenDirection::Down, 0.0, None, self.ceiling);
                        self.pass_streak = 0;
                        self.widen_events += 1;
                        widened = Some(WidenDirection::Down);
                    }
                    _ => self.bracket = self.bracket.update(guess, verdict, None)?,
                }
            }
        }
        Ok(SearchStep {
            guess,
            verdict,
            width_after: self.bracket.width(),
            widened,
        })
    }
}

/// Delay search in seconds, starting from `[0, T_worst-case]`.
pub type TimingHeuristic = SuccessiveApproximation;

/// Energy search in joules plus the running integral for the current trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyHeuristic {
    search: SuccessiveApproximation,
    accumulator: f64,
}

impl EnergyHeuristic {
    /// `ceiling` is the wait energy of one full worst-case trial.
    pub fn new(ceiling: f64, policy: DriftPolicy) -> Result<Self> {
        Ok(EnergyHeuristic {
            search: SuccessiveApproximation::new(ceiling, policy)?,
            accumulator: 0.0,
        })
    }

    pub fn search(&self) -> &SuccessiveApproximation {
        &self.search
    }

    pub fn accumulator(&self) -> f64 {
        self.accumulator
    }

    pub fn target(&self) -> f64 {
        self.search.next_guess()
    }

    pub fn begin_trial(&mut self) {
        self.accumulator = 0.0;
    }

    /// Accumulates one sample; returns whether the energy target has been reached.
    ///
    /// Negative instantaneous power (noise below zero current) is not
    /// accumulated, so the integral never decreases within a trial.
    #[inline]
    pub fn step(&mut self, sample: &Sample, sample_period: f64) -> bool {
        self.accumulator += (sample.voltage * sample.current).max(0.0) * sample_period;
        self.accumulator >= self.target()
    }

    pub fn record(
        &mut self,
        target: f64,
        verdict: Verdict,
        observation: Option<FailObservation>,
    ) -> Result<SearchStep> {
        let step = self.search.record(target, verdict, observation)?;
        self.accumulator = 0.0;
        Ok(step)
    }
}

/// Return-to-idle detector state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurrentHeuristicState {
    /// Idle-current threshold, amperes.
    pub ict: f64,
    pub threshold_factor: f64,
    /// Seconds after the operation starts before completion may be declared.
    pub min_latency: f64,
}

impl CurrentHeuristicState {
    pub fn new(idle_current: f64, threshold_factor: f64, min_latency: f64) -> Result<Self> {
        if !(idle_current.is_finite() && idle_current > 0.0) {
            return Err(Error::param(
                "idle_current",
                format!("{idle_current} must be > 0 for the idle threshold to mean anything"),
            ));
        }
        if !(threshold_factor.is_finite() && threshold_factor > 1.0) {
            return Err(Error::param("threshold_factor", format!("{threshold_factor} must be > 1")));
        }
        if !(min_latency.is_finite() && min_latency >= 0.0) {
            return Err(Error::param("min_latency", format!("{min_latency} must be >= 0")));
        }
        Ok(CurrentHeuristicState {
            ict: idle_current * threshold_factor,
            threshold_factor,
            min_latency,
        })
    }

    /// `t` is time since the operation started; `filtered_current` has been
    /// through the moving-average filter.
    #[inline]
    pub fn step(&self, filtered_current: f64, t: f64) -> CompletionStatus {
        if t >= self.min_latency && filtered_current <= self.ict {
            CompletionStatus::Complete
        } else {
            CompletionStatus::Ongoing
        }
    }

    /// First time in `(t, filtered_current)` pairs at which the detector fires.
    pub fn first_completion(&self, stream: impl IntoIterator<Item = (f64, f64)>) -> Option<f64> {
        stream
            .into_iter()
            .find(|&(t, i)| self.step(i, t) == CompletionStatus::Complete)
            .map(|(t, _)| t)
    }
}

/// Detector tuning shared by all kinds, in SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub threshold_factor: f64,
    /// Fixed minimum latency, seconds; `None` derives it from a characterisation run.
    pub min_latency: Option<f64>,
    pub resolution: f64,
    pub widen_factor: f64,
    pub filter_window: usize,
    pub downward_after: Option<u32>,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            threshold_factor: DEFAULT_THRESHOLD_FACTOR,
            min_latency: None,
            resolution: DEFAULT_RESOLUTION,
            widen_factor: DEFAULT_WIDEN_FACTOR,
            filter_window: DEFAULT_FILTER_WINDOW,
            downward_after: None,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_factor.is_finite() && self.threshold_factor > 1.0) {
            return Err(Error::param("threshold_factor", format!("{} must be > 1", self.threshold_factor)));
        }
        if let Some(m) = self.min_latency {
            if !(m.is_finite() && m >= 0.0) {
                return Err(Error::param("min_latency", format!("{m} must be >= 0")));
            }
        }
        if self.filter_window == 0 {
            return Err(Error::param("filter_window", "must be at least 1"));
        }
        self.drift_policy().validate()
    }

    pub fn drift_policy(&self) -> DriftPolicy {
        DriftPolicy {
            resolution: self.resolution,
            widen_factor: self.widen_factor,
            downward_after: self.downward_after,
        }
    }
}
