//! Aggregated statistics and the control-versus-detector tables.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{DetectorKind, ExperimentConfig, TrialResult};
use crate::detectors::Verdict;
use crate::devices::{ControlBaseline, MixEntry};
use crate::error::{Error, Result};

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stddev: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stddev = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, stddev }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub device: String,
    pub mix: Vec<MixEntry>,
    pub detector: DetectorKind,
    pub iodvs: bool,
    pub trials: usize,
    pub warmup: usize,
    pub seed: u64,
    /// How per-stage values aggregate trials.
    pub statistic: String,
    /// Only energy is meaningful when the baseline waits a median rather than a worst case.
    pub energy_only: bool,
    pub wait_latency_s: Stat,
    pub all_latency_s: Stat,
    pub wait_energy_j: Stat,
    pub all_energy_j: Stat,
    pub host_energy_j: Stat,
    /// Post-warm-up trials that needed fallback polling.
    pub fail_extensions: usize,
    pub fail_extensions_total: usize,
    /// Operations whose drawn completion time was clamped to the worst case.
    pub clamp_events: usize,
    /// Operations whose final read-back failed. Always zero unless the host logic is broken.
    pub verification_failures: usize,
    pub widen_events: u32,
    /// The host overhead power components are placeholders, not measurements.
    pub overhead_calibrated: bool,
    pub warnings: Vec<String>,
    pub trial_results: Vec<TrialResult>,
}

impl BenchmarkReport {
    pub fn from_trials(cfg: &ExperimentConfig, trials: Vec<TrialResult>, widen_events: u32) -> Self {
        let post = &trials[cfg.warmup.min(trials.len())..];
        let col = |f: fn(&TrialResult) -> f64| Stat::of(&post.iter().map(f).collect::<Vec<_>>());
        let ops = trials.iter().flat_map(|t| t.operations.iter());
        BenchmarkReport {
            device: cfg.model.name.clone(),
            mix: cfg.mix.clone(),
            detector: cfg.detector,
            iodvs: cfg.iodvs.is_some(),
            trials: cfg.trials,
            warmup: cfg.warmup,
            seed: cfg.seed,
            statistic: format!("mean and sample stddev over trials {}..{}", cfg.warmup, cfg.trials),
            energy_only: cfg.model.control == ControlBaseline::Median,
            wait_latency_s: col(|t| t.wait_latency),
            all_latency_s: col(|t| t.all_latency),
            wait_energy_j: col(|t| t.wait_energy),
            all_energy_j: col(|t| t.all_energy),
            host_energy_j: col(|t| t.host_energy),
            fail_extensions: post.iter().filter(|t| t.fail_extended).count(),
            fail_extensions_total: trials.iter().filter(|t| t.fail_extended).count(),
            clamp_events: ops.clone().filter(|o| o.clamped).count(),
            verification_failures: ops.filter(|o| o.final_verdict == Verdict::Fail).count(),
            widen_events,
            overhead_calibrated: false,
            warnings: cfg.warnings(),
            trial_results: trials,
        }
    }

    /// Label used in table headers, e.g. `PACER-T+IODVS`.
    pub fn label(&self) -> String {
        let base = self.detector.display_name();
        if self.iodvs {
            format!("{base}+IODVS")
        } else {
            base.to_string()
        }
    }

    pub fn value(&self, stage: Stage, quantity: Quantity) -> f64 {
        match (stage, quantity) {
            (Stage::Wait, Quantity::Latency) => self.wait_latency_s.mean,
            (Stage::All, Quantity::Latency) => self.all_latency_s.mean,
            (Stage::Wait, Quantity::Energy) => self.wait_energy_j.mean,
            (Stage::All, Quantity::Energy) => self.all_energy_j.mean,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Wait,
    All,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Wait => "Wait",
            Stage::All => "All",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    Latency,
    Energy,
}

impl Quantity {
    /// Display scale and unit: milliseconds and microjoules.
    pub fn unit(self) -> (f64, &'static str) {
        match self {
            Quantity::Latency => (1e3, "ms"),
            Quantity::Energy => (1e6, "uJ"),
        }
    }
}

/// `(control - treatment) / control * 100`; positive means the treatment improved.
pub fn diff_percent(control: f64, treatment: f64) -> f64 {
    if control == 0.0 {
        0.0
    } else {
        (control - treatment) / control * 100.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffRow {
    pub quantity: Quantity,
    pub stage: Stage,
    /// SI units.
    pub control: f64,
    pub treatment: f64,
    pub diff_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffTable {
    pub device: String,
    pub control: String,
    pub treatment: String,
    pub rows: Vec<DiffRow>,
}

impl DiffTable {
    pub fn row(&self, quantity: Quantity, stage: Stage) -> Option<&DiffRow> {
        self.rows.iter().find(|r| r.quantity == quantity && r.stage == stage)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("quantity,stage,unit,control,treatment,diff_pct\n");
        for r in &self.rows {
            let (scale, unit) = r.quantity.unit();
            let q = match r.quantity {
                Quantity::Latency => "latency",
                Quantity::Energy => "energy",
            };
            out.push_str(&format!(
                "{q},{},{unit},{:.4},{:.4},{:.2}\n",
                r.stage.label(),
                r.control * scale,
                r.treatment * scale,
                r.diff_pct
            ));
        }
        out
    }
}

impl fmt::Display for DiffTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}: {} vs {}", self.device, self.treatment, self.control)?;
        writeln!(f, "{:<16}{:>14}{:>14}{:>9}", "Stage", "Control", "Treatment", "Diff")?;
        for r in &self.rows {
            let (scale, unit) = r.quantity.unit();
            writeln!(
                f,
                "{:<16}{:>14.2}{:>14.2}{:>8.1}%",
                format!("{} ({unit})", r.stage.label()),
                r.control * scale,
                r.treatment * scale,
                r.diff_pct
            )?;
        }
        Ok(())
    }
}

fn check_comparable(treatment: &BenchmarkReport, control: &BenchmarkReport) -> Result<()> {
    if treatment.device != control.device {
        return Err(Error::Comparison(format!(
            "device `{}` vs `{}`",
            treatment.device, control.device
        )));
    }
    if treatment.mix != control.mix {
        return Err(Error::Comparison(format!("operation mixes differ on `{}`", treatment.device)));
    }
    Ok(())
}

/// Wait/All by latency/energy differences; energy rows only for median-baseline devices.
pub fn compare_reports(treatment: &BenchmarkReport, control: &BenchmarkReport) -> Result<DiffTable> {
    check_comparable(treatment, control)?;
    let quantities: &[Quantity] = if control.energy_only {
        &[Quantity::Energy]
    } else {
        &[Quantity::Latency, Quantity::Energy]
    };
    let mut rows = Vec::new();
    for &quantity in quantities {
        for stage in [Stage::Wait, Stage::All] {
            let c = control.value(stage, quantity);
            let t = treatment.value(stage, quantity);
            rows.push(DiffRow { quantity, stage, control: c, treatment: t, diff_pct: diff_percent(c, t) });
        }
    }
    Ok(DiffTable {
        device: treatment.device.clone(),
        control: control.label(),
        treatment: treatment.label(),
        rows,
    })
}

/// One line of a Control / detector / detector+IODVS table, in display units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub quantity: Quantity,
    pub stage: String,
    pub control: f64,
    pub pacer: f64,
    pub diff_pct: f64,
    pub pacer_iodvs: Option<f64>,
    pub diff_iodvs_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub title: String,
    pub pacer_label: String,
    pub rows: Vec<TableRow>,
}

/// Builds the table for one device. Median-baseline devices get a single
/// energy row (the wait phase) labelled with the device name.
pub fn device_table(
    title: &str,
    control: &BenchmarkReport,
    pacer: &BenchmarkReport,
    pacer_iodvs: Option<&BenchmarkReport>,
) -> Result<TableReport> {
    check_comparable(pacer, control)?;
    if let Some(i) = pacer_iodvs {
        check_comparable(i, control)?;
    }
    let cells: Vec<(Quantity, Stage, String)> = if control.energy_only {
        vec![(Quantity::Energy, Stage::Wait, control.device.clone())]
    } else {
        [Quantity::Latency, Quantity::Energy]
            .into_iter()
            .flat_map(|q| [Stage::Wait, Stage::All].map(|s| (q, s, s.label().to_string())))
            .collect()
    };
    let rows = cells
        .into_iter()
        .map(|(quantity, stage, name)| {
            let (scale, _) = quantity.unit();
            let c = control.value(stage, quantity);
            let p = pacer.value(stage, quantity);
            let pi = pacer_iodvs.map(|r| r.value(stage, quantity));
            TableRow {
                quantity,
                stage: name,
                control: c * scale,
                pacer: p * scale,
                diff_pct: diff_percent(c, p),
                pacer_iodvs: pi.map(|v| v * scale),
                diff_iodvs_pct: pi.map(|v| diff_percent(c, v)),
            }
        })
        .collect();
    Ok(TableReport {
        title: title.to_string(),
        pacer_label: pacer.detector.display_name().to_string(),
        rows,
    })
}

impl TableReport {
    pub fn row(&self, quantity: Quantity, stage: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.quantity == quantity && r.stage == stage)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,stage,control,pacer,diff_pct,pacer_iodvs,diff_iodvs_pct\n");
        for r in &self.rows {
            let section = match r.quantity {
                Quantity::Latency => "latency_ms",
                Quantity::Energy => "energy_uj",
            };
            let opt = |v: Option<f64>, p: usize| v.map_or(String::new(), |x| format!("{x:.p$}"));
            out.push_str(&format!(
                "{section},{},{:.2},{:.2},{:.1},{},{}\n",
                r.stage,
                r.control,
                r.pacer,
                r.diff_pct,
                opt(r.pacer_iodvs, 2),
                opt(r.diff_iodvs_pct, 1)
            ));
        }
        out
    }
}

impl fmt::Display for TableReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.title)?;
        let mut section = None;
        for r in &self.rows {
            if section != Some(r.quantity) {
                let (_, unit) = r.quantity.unit();
                let name = match r.quantity {
                    Quantity::Latency => "Latency",
                    Quantity::Energy => "Energy",
                };
                writeln!(
                    f,
                    "{:<12}{:>12}{:>12}{:>8}{:>14}{:>8}",
                    format!("{name} ({unit})"),
                    "Control",
                    self.pacer_label,
                    "Diff",
                    "+IODVS",
                    "Diff"
                )?;
                section = Some(r.quantity);
            }
            let pi = r.pacer_iodvs.map_or("-".to_string(), |v| format!("{v:.2}"));
            let di = r.diff_iodvs_pct.map_or("-".to_string(), |v| format!("{v:.1}%"));
            writeln!(
                f,
                "{:<12}{:>12.2}{:>12.2}{:>7.1}%{:>14}{:>8}",
                r.stage, r.control, r.pacer, r.diff_pct, pi, di
            )?;
        }
        Ok(())
    }
}
