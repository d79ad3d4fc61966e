//! Calibrated device roster.
//!
//! Busy and slack currents come from the measured wait energies: the busy
//! level is the tuned wait energy over the tuned wait time, the idle level is
//! the remaining control wait energy over the slack. Command and verify
//! currents are the non-wait energy over the non-wait time.

use std::collections::BTreeMap;

use super::{
    CompletionDistribution, ControlBaseline, ControlTargets, DeviceModel, MixEntry, OperationSpec, WaitShape,
};
use crate::error::{Error, Result};
use crate::power::IodvsPolicy;
use crate::trace::DEFAULT_SAMPLE_PERIOD;

pub const BUILTIN_NAMES: [&str; 8] = [
    "eeprom",
    "nor_flash",
    "nand_flash",
    "sd_sandisk",
    "sd_lexar",
    "sd_swissbit",
    "sd_kingston",
    "hih6130",
];

const V: f64 = 3.3;

const fn ms(x: f64) -> f64 {
    x * 1e-3
}

const fn ma(x: f64) -> f64 {
    x * 1e-3
}

const fn uj(x: f64) -> f64 {
    x * 1e-6
}

/// Current that dissipates `energy_uj` over `time_ms` at the nominal supply.
fn current_for(energy_uj: f64, time_ms: f64) -> f64 {
    uj(energy_uj) / (V * ms(time_ms))
}

fn iodvs(ratio: f64) -> IodvsPolicy {
    IodvsPolicy {
        nominal_voltage: V,
        wait_voltage: V * ratio,
        wait_current_scale: 1.0,
        transition_energy: 0.0,
    }
}

struct Op {
    worst_ms: f64,
    completion: CompletionDistribution,
    active_ms: f64,
    verify_ms: f64,
    io_current: f64,
    wait_current: f64,
    shape: WaitShape,
    poll_current: f64,
}

impl Op {
    fn build(self) -> OperationSpec {
        OperationSpec {
            worst_case_wait: ms(self.worst_ms),
            completion: self.completion,
            active_duration: ms(self.active_ms),
            verify_duration: ms(self.verify_ms),
            active_current: self.io_current,
            wait_current: self.wait_current,
            verify_current: self.io_current,
            wait_shape: self.shape,
            noise_stddev: 0.02 * self.io_current,
            poll_current: self.poll_current,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn model(
    name: &str,
    description: &str,
    idle_current: f64,
    host_quantum: f64,
    control: ControlBaseline,
    ops: Vec<(&str, Op)>,
    mix: &[(&str, u32)],
    iodvs_ratio: f64,
    targets: ControlTargets,
) -> DeviceModel {
    DeviceModel {
        name: name.to_string(),
        description: description.to_string(),
        supply_voltage: V,
        idle_current,
        idle_prefix: ms(0.5),
        host_quantum,
        sample_period: DEFAULT_SAMPLE_PERIOD,
        control,
        operations: ops.into_iter().map(|(n, o)| (n.to_string(), o.build())).collect::<BTreeMap<_, _>>(),
        mix: mix
            .iter()
            .map(|&(op, count)| MixEntry { op: op.to_string(), count })
            .collect(),
        iodvs: Some(iodvs(iodvs_ratio)),
        targets,
    }
}

fn latency_energy_targets(wait_ms: f64, all_ms: f64, wait_uj: f64, all_uj: f64) -> ControlTargets {
    ControlTargets {
        wait_latency: Some(ms(wait_ms)),
        all_latency: Some(ms(all_ms)),
        wait_energy: Some(uj(wait_uj)),
        all_energy: Some(uj(all_uj)),
    }
}

fn eeprom() -> DeviceModel {
    // 5 ms worst case plus 50 us of host latency; the write itself takes about 3.5 ms.
    let t_star = 3.505;
    let busy = current_for(37.89, 3.51);
    let idle = current_for(46.84 - 37.89, 5.05 - 3.51);
    model(
        "eeprom",
        "serial EEPROM, 128-byte page write",
        idle,
        ms(0.05),
        ControlBaseline::WorstCase,
        vec![(
            "page_write",
            Op {
                worst_ms: 5.0,
                completion: CompletionDistribution::Deterministic { time: ms(t_star) },
                active_ms: 0.45,
                verify_ms: 0.48,
                io_current: current_for(53.05 - 46.84, 0.93),
                wait_current: busy,
                shape: WaitShape::Stepped { miss_current: None },
                poll_current: 0.0,
            },
        )],
        &[("page_write", 1)],
        27.85 / 37.89,
        latency_energy_targets(5.05, 5.98, 46.84, 53.05),
    )
}

fn nor_flash() -> DeviceModel {
    // One subsector erase followed by eight page programs.
    let quantum = (231.57 - 230.0) / 9.0;
    let busy = current_for(1212.0, 69.47);
    let idle = current_for(2138.3 - 1212.0, 231.57 - 69.47);
    let io = current_for(2277.0 - 2138.3, 243.87 - 231.57);
    let page_ms = (69.47 - 65.0) / 8.0;
    model(
        "nor_flash",
        "serial NOR flash, subsector erase and page programs",
        idle,
        ms(quantum),
        ControlBaseline::WorstCase,
        vec![
            (
                "subsector_erase",
                Op {
                    worst_ms: 150.0,
                    completion: CompletionDistribution::Deterministic { time: ms(65.0 - 0.005) },
                    active_ms: 0.05,
                    verify_ms: 0.65,
                    io_current: io,
                    wait_current: busy,
                    shape: WaitShape::Stepped { miss_current: None },
                    poll_current: 0.0,
                },
            ),
            (
                "page_write",
                Op {
                    worst_ms: 10.0,
                    completion: CompletionDistribution::Deterministic { time: ms(page_ms - 0.005) },
                    active_ms: 0.7,
                    verify_ms: 0.75,
                    io_current: io,
                    wait_current: busy,
                    shape: WaitShape::Stepped { miss_current: None },
                    poll_current: 0.0,
                },
            ),
        ],
        &[("subsector_erase", 1), ("page_write", 8)],
        1029.52 / 1212.0,
        latency_energy_targets(231.57, 243.87, 2138.3, 2277.0),
    )
}

fn nand_flash() -> DeviceModel {
    // Sixteen page programs of 3.5 ms worst case each.
    let pages = 16.0;
    let quantum = (57.61 - pages * 3.5) / pages;
    let t_star = 19.26 / pages;
    let busy = current_for(806.2, 19.26);
    let idle = current_for(1053.0 - 806.2, 57.61 - 19.26);
    let io = current_for(1247.9 - 1053.0, 71.28 - 57.61);
    let io_ms = (71.28 - 57.61) / pages;
    model(
        "nand_flash",
        "serial flash, page programs",
        idle,
        ms(quantum),
        ControlBaseline::WorstCase,
        vec![(
            "page_write",
            Op {
                worst_ms: 3.5,
                completion: CompletionDistribution::Deterministic { time: ms(t_star - 0.005) },
                active_ms: 0.4,
                verify_ms: io_ms - 0.4,
                io_current: io,
                wait_current: busy,
                shape: WaitShape::Stepped { miss_current: None },
                poll_current: 0.0,
            },
        )],
        &[("page_write", 16)],
        584.87 / 806.2,
        latency_energy_targets(57.61, 71.28, 1053.0, 1247.9),
    )
}

fn hih6130() -> DeviceModel {
    // The ADC draws a decaying charge current on top of a floor slightly above idle.
    let t_star = 31.45 - 0.005;
    let mean_busy = current_for(240.29, 31.45);
    let idle = current_for(325.95 - 240.29, 45.27 - 31.45);
    let floor = 1.2 * idle;
    let tau = ms(8.0);
    let t = ms(t_star);
    let amplitude = (mean_busy - floor) * t / (tau * (1.0 - (-t / tau).exp()));
    model(
        "hih6130",
        "humidity/temperature sensor, single measurement",
        idle,
        ms(0.27),
        ControlBaseline::WorstCase,
        vec![(
            "measure",
            Op {
                worst_ms: 45.0,
                completion: CompletionDistribution::Deterministic { time: t },
                active_ms: 0.36,
                verify_ms: 0.36,
                io_current: current_for(330.50 - 325.95, 45.99 - 45.27),
                wait_current: floor,
                shape: WaitShape::Decaying { peak_current: floor + amplitude, time_constant: tau },
                poll_current: 0.0,
            },
        )],
        &[("measure", 1)],
        169.62 / 240.29,
        latency_energy_targets(45.27, 45.99, 325.95, 330.50),
    )
}

const SD_IDLE: f64 = ma(2.0);
const SD_IO: f64 = ma(20.0);

#[allow(clippy::too_many_arguments)]
fn sd(
    name: &str,
    description: &str,
    worst_ms: f64,
    completion: CompletionDistribution,
    wait_current: f64,
    miss_current: Option<f64>,
    poll_current: f64,
    iodvs_ratio: f64,
    wait_uj: f64,
) -> DeviceModel {
    model(
        name,
        description,
        SD_IDLE,
        0.0,
        ControlBaseline::Median,
        vec![(
            "write",
            Op {
                worst_ms,
                completion,
                active_ms: 0.5,
                verify_ms: 0.5,
                io_current: SD_IO,
                wait_current,
                shape: WaitShape::Stepped { miss_current },
                poll_current,
            },
        )],
        &[("write", 1)],
        iodvs_ratio,
        ControlTargets {
            wait_energy: Some(uj(wait_uj)),
            ..ControlTargets::default()
        },
    )
}

fn sd_sandisk() -> DeviceModel {
    sd(
        "sd_sandisk",
        "micro-SD card with bimodal cache hit/miss write latency",
        250.0,
        CompletionDistribution::Bimodal { hit: ms(3.0), miss: ms(150.0), miss_probability: 0.3 },
        ma(30.0),
        Some(ma(101.0)),
        ma(12.8),
        11848.0 / 15198.0,
        17066.0,
    )
}

fn sd_lexar() -> DeviceModel {
    sd(
        "sd_lexar",
        "micro-SD card with bimodal cache hit/miss write latency",
        250.0,
        CompletionDistribution::Bimodal { hit: ms(2.0), miss: ms(200.0), miss_probability: 0.3 },
        ma(30.0),
        Some(ma(107.5)),
        ma(6.5),
        16977.0 / 21428.0,
        22707.0,
    )
}

fn sd_swissbit() -> DeviceModel {
    sd(
        "sd_swissbit",
        "micro-SD card with broad, roughly normal write latency",
        100.0,
        CompletionDistribution::Normal { mean: ms(20.0), stddev: ms(10.0) },
        ma(13.85),
        None,
        ma(138.5),
        554.0 / 914.0,
        2763.0,
    )
}

fn sd_kingston() -> DeviceModel {
    sd(
        "sd_kingston",
        "micro-SD card with tightly clustered write latency",
        20.0,
        CompletionDistribution::Normal { mean: ms(5.0), stddev: ms(0.03) },
        ma(57.0),
        None,
        ma(10.0),
        897.0 / 933.0,
        942.0,
    )
}

/// Every builtin model, in roster order.
pub fn builtin_models() -> Vec<DeviceModel> {
    vec![
        eeprom(),
        nor_flash(),
        nand_flash(),
        sd_sandisk(),
        sd_lexar(),
        sd_swissbit(),
        sd_kingston(),
        hih6130(),
    ]
}

pub fn builtin_model(name: &str) -> Result<DeviceModel> {
    builtin_models()
        .into_iter()
        .find(|m| m.name == name)
        .ok_or_else(|| Error::UnknownDevice {
            name: name.to_string(),
            available: BUILTIN_NAMES.join(", "),
        })
}
