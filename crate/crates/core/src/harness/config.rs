//! TOML experiment files.
//!
//! ```toml
//! seed = 7
//! trials = 50
//! warmup = 20
//!
//! [device]
//! name = "eeprom"            # a builtin, or
//! # model_file = "my.toml"   # a model file relative to this config
//!
//! [detector]
//! kind = "pacer_t"
//! resolution_us = 10
//!
//! [iodvs]                    # presence turns voltage scaling on
//! wait_voltage_v = 2.43      # omitted values come from the model's policy
//!
//! [[drift]]
//! from_trial = 25
//! scale = 1.15
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectorKind, DriftSchedule, DriftStep, ExperimentConfig, DEFAULT_TRIALS, DEFAULT_WARMUP};
use crate::detectors::DetectorParams;
use crate::devices::{builtin_model, DeviceModel, MixEntry};
use crate::error::{Error, Result};
use crate::power::{CommLink, IodvsPolicy, OverheadModel};

/// Polling period after a failed read-back.
pub const DEFAULT_POLL_INTERVAL: f64 = 100e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    pub device: DeviceSection,
    pub detector: DetectorSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iodvs: Option<IodvsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overhead: Option<OverheadSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub drift: Vec<DriftStep>,
}

fn default_seed() -> u64 {
    1
}

fn default_trials() -> usize {
    DEFAULT_TRIALS
}

fn default_warmup() -> usize {
    DEFAULT_WARMUP
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix: Option<Vec<MixEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_latency_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution_us: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widen_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downward_after: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poll_interval_us: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IodvsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wait_voltage_v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wait_current_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition_energy_uj: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverheadSection {
    pub mcu_mw: Option<f64>,
    pub mcd_mw: Option<f64>,
    pub matching_mw: Option<f64>,
    pub device_mw: Option<f64>,
    pub comm_capacitance_pf: Option<f64>,
    pub comm_frequency_mhz: Option<f64>,
    pub comm_vdd_v: Option<f64>,
}

impl ExperimentFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(crate::devices::file_toml_key(&e), e.message().to_string()))
    }

    /// Resolves the device and fills defaults. Relative model paths resolve against `base_dir`.
    pub fn resolve(self, base_dir: Option<&Path>) -> Result<ExperimentConfig> {
        let model = match (&self.device.name, &self.device.model_file) {
            (Some(_), Some(_)) => {
                return Err(Error::config("device", "set either `name` or `model_file`, not both"));
            }
            (Some(name), None) => builtin_model(name)?,
            (None, Some(file)) => {
                let path = match base_dir {
                    Some(dir) => dir.join(file),
                    None => file.into(),
                };
                DeviceModel::load(&path)?
            }
            (None, None) => return Err(Error::config("device", "needs `name` or `model_file`")),
        };
        let kind: DetectorKind = self.detector.kind.parse()?;
        let mut cfg = ExperimentConfig::new(model, kind);
        if let Some(mix) = self.device.mix {
            cfg.mix = mix;
        }
        let d = &self.detector;
        let defaults = DetectorParams::default();
        cfg.params = DetectorParams {
            threshold_factor: d.threshold_factor.unwrap_or(defaults.threshold_factor),
            min_latency: d.min_latency_ms.map(|v| v * 1e-3),
            resolution: d.resolution_us.map_or(defaults.resolution, |v| v * 1e-6),
            widen_factor: d.widen_factor.unwrap_or(defaults.widen_factor),
            filter_window: d.filter_window.unwrap_or(defaults.filter_window),
            downward_after: d.downward_after,
        };
        if let Some(p) = d.poll_interval_us {
            cfg.poll_interval = p * 1e-6;
        }
        if let Some(section) = self.iodvs {
            let base = cfg.model.iodvs;
            let nominal = cfg.model.supply_voltage;
            let wait_voltage = section
                .wait_voltage_v
                .or(base.map(|b| b.wait_voltage))
                .ok_or_else(|| Error::config("iodvs.wait_voltage_v", "required: the device has no calibrated policy"))?;
            cfg.iodvs = Some(IodvsPolicy {
                nominal_voltage: nominal,
                wait_voltage,
                wait_current_scale: section
                    .wait_current_scale
                    .or(base.map(|b| b.wait_current_scale))
                    .unwrap_or(1.0),
                transition_energy: section
                    .transition_energy_uj
                    .map(|v| v * 1e-6)
                    .or(base.map(|b| b.transition_energy))
                    .unwrap_or(0.0),
            });
        }
        if let Some(o) = self.overhead {
            let d = OverheadModel::default();
            cfg.overhead = OverheadModel {
                mcu: o.mcu_mw.map_or(d.mcu, |v| v * 1e-3),
                mcd: o.mcd_mw.map_or(d.mcd, |v| v * 1e-3),
                matching: o.matching_mw.map_or(d.matching, |v| v * 1e-3),
                device: o.device_mw.map_or(d.device, |v| v * 1e-3),
                comm: CommLink {
                    capacitance: o.comm_capacitance_pf.map_or(d.comm.capacitance, |v| v * 1e-12),
                    frequency: o.comm_frequency_mhz.map_or(d.comm.frequency, |v| v * 1e6),
                    vdd: o.comm_vdd_v.unwrap_or(d.comm.vdd),
                },
            };
        }
        cfg.trials = self.trials;
        cfg.warmup = self.warmup;
        cfg.seed = self.seed;
        cfg.drift = DriftSchedule { steps: self.drift };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        ExperimentFile::from_toml_str(text)?.resolve(base_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, path.parent())
    }
}
