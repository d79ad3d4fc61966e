//! Early-completion detection for embedded peripheral operations.
//!
//! The crate simulates peripherals that finish before their manufacturer
//! worst-case delay, detects the early completion with three heuristics
//! (timing, energy and current based), and runs seeded experiments comparing
//! them against a fixed-delay baseline.

pub mod detectors;
pub mod devices;
pub mod error;
pub mod harness;
pub mod power;
pub mod trace;

pub use detectors::{
    Bracket, CompletionStatus, CurrentHeuristicState, DetectorParams, DriftPolicy, EnergyHeuristic, FailObservation,
    SearchStep, SuccessiveApproximation, TimingHeuristic, Verdict, WidenDirection,
};
pub use devices::{
    builtin_model, builtin_models, poll_status, simulate_operation, verify_operation, CompletionDistribution,
    ControlBaseline, DeviceModel, OperationOutcome, OperationSpec, PollStatus, WaitShape,
};
pub use error::{Error, Result};
pub use power::{apply_iodvs, signaled_energy, worst_case_energy, IodvsPolicy, OverheadModel};
pub use trace::{
    energy_by_state, energy_integrate, filter_moving_average, instantaneous_power, CurrentTrace, DeviceState,
    EnergyByState, MovingAverageFilter, Sample,
};
pub use harness::{
    compare_reports, run_convergence_study, run_experiment, run_suite, BenchmarkReport, DetectorKind, DiffTable,
    ExperimentConfig, TrialResult,
};
