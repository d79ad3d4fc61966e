//! The full benchmark: every device under its baseline and detectors, plus calibration checks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{device_table, run_experiment, BenchmarkReport, DetectorKind, ExperimentConfig, Quantity, TableReport};
use crate::devices::{builtin_model, DeviceModel};
use crate::error::Result;

/// Largest energy reduction the suite must show, percent.
pub const HEADLINE_ENERGY_PCT: f64 = 75.0;
/// Largest whole-transaction latency reduction the suite must show, percent.
pub const HEADLINE_LATENCY_PCT: f64 = 62.0;
/// Calibration tolerance on control means, percent.
pub const CALIBRATION_TOLERANCE_PCT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadlineCheck {
    pub name: String,
    pub value_pct: f64,
    pub threshold_pct: f64,
    pub source: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub checks: Vec<HeadlineCheck>,
    pub verification_failures: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedRun {
    pub name: String,
    pub report: BenchmarkReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seed: u64,
    /// File stem for each table's CSV, paired with the table.
    pub tables: Vec<(String, TableReport)>,
    pub runs: Vec<NamedRun>,
    pub summary: SuiteSummary,
}

impl SuiteReport {
    pub fn run(&self, name: &str) -> Option<&BenchmarkReport> {
        self.runs.iter().find(|r| r.name == name).map(|r| &r.report)
    }

    pub fn table(&self, stem: &str) -> Option<&TableReport> {
        self.tables.iter().find(|(s, _)| s == stem).map(|(_, t)| t)
    }
}

struct Plan {
    name: String,
    cfg: ExperimentConfig,
}

fn plan(model: &DeviceModel, detector: DetectorKind, iodvs: bool, seed: u64) -> Result<Plan> {
    let mut cfg = ExperimentConfig::new(model.clone(), detector);
    cfg.seed = seed;
    if iodvs {
        cfg = cfg.with_model_iodvs()?;
    }
    let name = format!("{}_{}{}", model.name, detector.label(), if iodvs { "_iodvs" } else { "" });
    Ok(Plan { name, cfg })
}

/// Device, detector used in its table, and extra detectors run alongside.
const ROSTER: [(&str, DetectorKind, &[DetectorKind]); 8] = [
    ("eeprom", DetectorKind::PacerT, &[DetectorKind::PacerE, DetectorKind::PacerC]),
    ("nor_flash", DetectorKind::PacerT, &[]),
    ("nand_flash", DetectorKind::PacerT, &[]),
    ("sd_sandisk", DetectorKind::PacerC, &[]),
    ("sd_lexar", DetectorKind::PacerC, &[]),
    ("sd_swissbit", DetectorKind::PacerC, &[]),
    ("sd_kingston", DetectorKind::PacerC, &[]),
    ("hih6130", DetectorKind::PacerE, &[DetectorKind::PacerT]),
];

const TABLES: [(&str, &str, &[&str]); 5] = [
    ("table1_eeprom", "EEPROM page write", &["eeprom"]),
    ("table2_nor_flash", "NOR flash erase + page programs", &["nor_flash"]),
    ("table3_nand_flash", "NAND flash page programs", &["nand_flash"]),
    ("table4_sd_cards", "Micro-SD card writes (wait energy)", &["sd_sandisk", "sd_lexar", "sd_swissbit", "sd_kingston"]),
    ("table5_hih6130", "HIH-6130 measurement", &["hih6130"]),
];

/// Runs every experiment in parallel and assembles the tables and headline checks.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let mut plans = Vec::new();
    for (name, main, extra) in ROSTER {
        let model = builtin_model(name)?;
        plans.push(plan(&model, DetectorKind::Control, false, seed)?);
        plans.push(plan(&model, main, false, seed)?);
        plans.push(plan(&model, main, true, seed)?);
        for &d in extra {
            plans.push(plan(&model, d, false, seed)?);
        }
    }
    let reports: Vec<Result<BenchmarkReport>> = plans.par_iter().map(|p| run_experiment(&p.cfg)).collect();
    let mut runs = Vec::with_capacity(plans.len());
    for (p, r) in plans.iter().zip(reports) {
        let mut report = r?;
        report.trial_results.clear();
        runs.push(NamedRun { name: p.name.clone(), report });
    }
    let find = |name: &str| runs.iter().find(|r| r.name == name).map(|r| &r.report).expect("planned run");

    let mut tables = Vec::new();
    for (stem, title, devices) in TABLES {
        let mut merged: Option<TableReport> = None;
        for dev in devices {
            let main = ROSTER.iter().find(|r| r.0 == *dev).expect("roster entry").1;
            let control = find(&format!("{dev}_control"));
            let pacer = find(&format!("{dev}_{}", main.label()));
            let iodvs = find(&format!("{dev}_{}_iodvs", main.label()));
            let t = device_table(title, control, pacer, Some(iodvs))?;
            match &mut merged {
                Some(m) => m.rows.extend(t.rows),
                None => merged = Some(t),
            }
        }
        tables.push((stem.to_string(), merged.expect("table has devices")));
    }

    let mut best_energy = (f64::NEG_INFINITY, String::new());
    let mut best_latency = (f64::NEG_INFINITY, String::new());
    for (stem, t) in &tables {
        for r in &t.rows {
            let candidates = [(Some(r.diff_pct), t.pacer_label.clone()), (r.diff_iodvs_pct, format!("{}+IODVS", t.pacer_label))];
            for (v, label) in candidates {
                let Some(v) = v else { continue };
                let source = format!("{stem} {} {} ({label})", r.stage, quantity_name(r.quantity));
                match r.quantity {
                    Quantity::Energy if v > best_energy.0 => best_energy = (v, source),
                    Quantity::Latency if r.stage == "All" && v > best_latency.0 => best_latency = (v, source),
                    _ => {}
                }
            }
        }
    }
    let checks = vec![
        HeadlineCheck {
            name: "max energy reduction".into(),
            value_pct: best_energy.0,
            threshold_pct: HEADLINE_ENERGY_PCT,
            source: best_energy.1,
            passed: best_energy.0 >= HEADLINE_ENERGY_PCT,
        },
        HeadlineCheck {
            name: "max all-stage latency reduction".into(),
            value_pct: best_latency.0,
            threshold_pct: HEADLINE_LATENCY_PCT,
            source: best_latency.1,
            passed: best_latency.0 >= HEADLINE_LATENCY_PCT,
        },
    ];
    let verification_failures = runs.iter().map(|r| r.report.verification_failures).sum();
    let passed = checks.iter().all(|c| c.passed) && verification_failures == 0;
    Ok(SuiteReport {
        seed,
        tables,
        runs,
        summary: SuiteSummary { checks, verification_failures, passed },
    })
}

fn quantity_name(q: Quantity) -> &'static str {
    match q {
        Quantity::Latency => "latency",
        Quantity::Energy => "energy",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub quantity: String,
    /// Display units (ms or uJ).
    pub target: f64,
    pub measured: f64,
    pub deviation_pct: f64,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub device: String,
    pub rows: Vec<CalibrationRow>,
    pub passed: bool,
}

/// Runs the control baseline with default trial counts and compares against the model's targets.
pub fn calibrate(model: &DeviceModel, seed: u64) -> Result<Calibration> {
    let mut cfg = ExperimentConfig::new(model.clone(), DetectorKind::Control);
    cfg.seed = seed;
    let report = run_experiment(&cfg)?;
    let t = &model.targets;
    let cells = [
        ("wait_latency_ms", t.wait_latency, report.wait_latency_s.mean, 1e3),
        ("all_latency_ms", t.all_latency, report.all_latency_s.mean, 1e3),
        ("wait_energy_uj", t.wait_energy, report.wait_energy_j.mean, 1e6),
        ("all_energy_uj", t.all_energy, report.all_energy_j.mean, 1e6),
    ];
    let rows: Vec<CalibrationRow> = cells
        .into_iter()
        .filter_map(|(name, target, measured, scale)| {
            let target = target?;
            let deviation_pct = (measured - target) / target * 100.0;
            Some(CalibrationRow {
                quantity: name.to_string(),
                target: target * scale,
                measured: measured * scale,
                deviation_pct,
                within_tolerance: deviation_pct.abs() <= CALIBRATION_TOLERANCE_PCT,
            })
        })
        .collect();
    Ok(Calibration {
        device: model.name.clone(),
        passed: rows.iter().all(|r| r.within_tolerance),
        rows,
    })
}
