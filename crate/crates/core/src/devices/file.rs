//! TOML device model files. Every quantity carries its unit in the key name.
//!
//! ```toml
//! name = "eeprom"
//! supply_voltage_v = 3.3
//! idle_current_ma = 1.76
//! control = "worst_case"
//!
//! [[mix]]
//! op = "page_write"
//! count = 1
//!
//! [operations.page_write]
//! worst_case_wait_ms = 5.0
//! completion = { kind = "deterministic", time_ms = 3.5 }
//! wait_shape = { kind = "stepped" }
//! # ...
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    CompletionDistribution, ControlBaseline, ControlTargets, DeviceModel, MixEntry, OperationSpec, WaitShape,
};
use crate::error::{Error, Result};
use crate::power::IodvsPolicy;
use crate::trace::DEFAULT_SAMPLE_PERIOD;

const MS: f64 = 1e-3;
const MA: f64 = 1e-3;
const UJ: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub supply_voltage_v: f64,
    pub idle_current_ma: f64,
    #[serde(default = "default_idle_prefix_ms")]
    pub idle_prefix_ms: f64,
    #[serde(default)]
    pub host_quantum_ms: f64,
    #[serde(default = "default_sample_period_us")]
    pub sample_period_us: f64,
    #[serde(default = "default_control")]
    pub control: ControlBaseline,
    pub mix: Vec<MixEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iodvs: Option<IodvsFile>,
    #[serde(default)]
    pub targets: TargetsFile,
    pub operations: BTreeMap<String, OperationFile>,
}

fn default_idle_prefix_ms() -> f64 {
    0.5
}

fn default_sample_period_us() -> f64 {
    DEFAULT_SAMPLE_PERIOD * 1e6
}

fn default_control() -> ControlBaseline {
    ControlBaseline::WorstCase
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IodvsFile {
    pub wait_voltage_v: f64,
    #[serde(default = "one")]
    pub wait_current_scale: f64,
    #[serde(default)]
    pub transition_energy_uj: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetsFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wait_latency_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub all_latency_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wait_energy_uj: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub all_energy_uj: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperationFile {
    pub worst_case_wait_ms: f64,
    pub completion: CompletionFile,
    pub active_duration_ms: f64,
    pub verify_duration_ms: f64,
    pub active_current_ma: f64,
    pub wait_current_ma: f64,
    pub verify_current_ma: f64,
    pub wait_shape: WaitShapeFile,
    #[serde(default)]
    pub noise_stddev_ma: f64,
    #[serde(default)]
    pub poll_current_ma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CompletionFile {
    Deterministic { time_ms: f64 },
    Normal { mean_ms: f64, stddev_ms: f64 },
    Bimodal { hit_ms: f64, miss_ms: f64, miss_probability: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WaitShapeFile {
    Constant,
    Stepped {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        miss_current_ma: Option<f64>,
    },
    Decaying { peak_current_ma: f64, time_constant_ms: f64 },
}

impl From<&DeviceModel> for ModelFile {
    fn from(m: &DeviceModel) -> Self {
        ModelFile {
            name: m.name.clone(),
            description: m.description.clone(),
            supply_voltage_v: m.supply_voltage,
            idle_current_ma: m.idle_current / MA,
            idle_prefix_ms: m.idle_prefix / MS,
            host_quantum_ms: m.host_quantum / MS,
            sample_period_us: m.sample_period * 1e6,
            control: m.control,
            mix: m.mix.clone(),
            iodvs: m.iodvs.map(|p| IodvsFile {
                wait_voltage_v: p.wait_voltage,
                wait_current_scale: p.wait_current_scale,
                transition_energy_uj: p.transition_energy / UJ,
            }),
            targets: TargetsFile {
                wait_latency_ms: m.targets.wait_latency.map(|v| v / MS),
                all_latency_ms: m.targets.all_latency.map(|v| v / MS),
                wait_energy_uj: m.targets.wait_energy.map(|v| v / UJ),
                all_energy_uj: m.targets.all_energy.map(|v| v / UJ),
            },
            operations: m
                .operations
                .iter()
                .map(|(k, o)| (k.clone(), OperationFile::from(o)))
                .collect(),
        }
    }
}

impl From<&OperationSpec> for OperationFile {
    fn from(o: &OperationSpec) -> Self {
        OperationFile {
            worst_case_wait_ms: o.worst_case_wait / MS,
            completion: match o.completion {
                CompletionDistribution::Deterministic { time } => CompletionFile::Deterministic { time_ms: time / MS },
                CompletionDistribution::Normal { mean, stddev } => CompletionFile::Normal {
                    mean_ms: mean / MS,
                    stddev_ms: stddev / MS,
                },
                CompletionDistribution::Bimodal { hit, miss, miss_probability } => CompletionFile::Bimodal {
                    hit_ms: hit / MS,
                    miss_ms: miss / MS,
                    miss_probability,
                },
            },
            active_duration_ms: o.active_duration / MS,
            verify_duration_ms: o.verify_duration / MS,
            active_current_ma: o.active_current / MA,
            wait_current_ma: o.wait_current / MA,
            verify_current_ma: o.verify_current / MA,
            wait_shape: match o.wait_shape {
                WaitShape::Constant => WaitShapeFile::Constant,
                WaitShape::Stepped { miss_current } => WaitShapeFile::Stepped {
                    miss_current_ma: miss_current.map(|c| c / MA),
                },
                WaitShape::Decaying { peak_current, time_constant } => WaitShapeFile::Decaying {
                    peak_current_ma: peak_current / MA,
                    time_constant_ms: time_constant / MS,
                },
            },
            noise_stddev_ma: o.noise_stddev / MA,
            poll_current_ma: o.poll_current / MA,
        }
    }
}

impl OperationFile {
    fn to_spec(&self) -> OperationSpec {
        OperationSpec {
            worst_case_wait: self.worst_case_wait_ms * MS,
            completion: match self.completion {
                CompletionFile::Deterministic { time_ms } => CompletionDistribution::Deterministic { time: time_ms * MS },
                CompletionFile::Normal { mean_ms, stddev_ms } => CompletionDistribution::Normal {
                    mean: mean_ms * MS,
                    stddev: stddev_ms * MS,
                },
                CompletionFile::Bimodal { hit_ms, miss_ms, miss_probability } => CompletionDistribution::Bimodal {
                    hit: hit_ms * MS,
                    miss: miss_ms * MS,
                    miss_probability,
                },
            },
            active_duration: self.active_duration_ms * MS,
            verify_duration: self.verify_duration_ms * MS,
            active_current: self.active_current_ma * MA,
            wait_current: self.wait_current_ma * MA,
            verify_current: self.verify_current_ma * MA,
            wait_shape: match self.wait_shape {
                WaitShapeFile::Constant => WaitShape::Constant,
                WaitShapeFile::Stepped { miss_current_ma } => WaitShape::Stepped {
                    miss_current: miss_current_ma.map(|c| c * MA),
                },
                WaitShapeFile::Decaying { peak_current_ma, time_constant_ms } => WaitShape::Decaying {
                    peak_current: peak_current_ma * MA,
                    time_constant: time_constant_ms * MS,
                },
            },
            noise_stddev: self.noise_stddev_ma * MA,
            poll_current: self.poll_current_ma * MA,
        }
    }
}

impl ModelFile {
    /// Converts to SI units and validates.
    pub fn into_model(self) -> Result<DeviceModel> {
        let model = DeviceModel {
            operations: self.operations.iter().map(|(k, o)| (k.clone(), o.to_spec())).collect(),
            name: self.name,
            description: self.description,
            supply_voltage: self.supply_voltage_v,
            idle_current: self.idle_current_ma * MA,
            idle_prefix: self.idle_prefix_ms * MS,
            host_quantum: self.host_quantum_ms * MS,
            sample_period: self.sample_period_us * 1e-6,
            control: self.control,
            mix: self.mix,
            iodvs: self.iodvs.map(|p| IodvsPolicy {
                nominal_voltage: self.supply_voltage_v,
                wait_voltage: p.wait_voltage_v,
                wait_current_scale: p.wait_current_scale,
                transition_energy: p.transition_energy_uj * UJ,
            }),
            targets: ControlTargets {
                wait_latency: self.targets.wait_latency_ms.map(|v| v * MS),
                all_latency: self.targets.all_latency_ms.map(|v| v * MS),
                wait_energy: self.targets.wait_energy_uj.map(|v| v * UJ),
                all_energy: self.targets.all_energy_uj.map(|v| v * UJ),
            },
        };
        model.validate().map_err(|e| match e {
            Error::Parameter { name, reason } => Error::config(name, reason),
            other => other,
        })?;
        Ok(model)
    }
}

impl DeviceModel {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ModelFile = toml::from_str(text).map_err(|e| Error::config(toml_key(&e), e.message().to_string()))?;
        file.into_model()
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(&ModelFile::from(self)).map_err(|e| Error::config(self.name.clone(), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Best-effort name of the offending key, for diagnostics.
pub(crate) fn toml_key(e: &toml::de::Error) -> String {
    let msg = e.message();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        return rest.split('`').next().unwrap_or("?").to_string();
    }
    if let Some(rest) = msg.strip_prefix("missing field `") {
        return rest.split('`').next().unwrap_or("?").to_string();
    }
    match e.span() {
        Some(span) => format!("<at byte {}>", span.start),
        None => "<document>".to_string(),
    }
}
