//! Deployment cost model for a neuromorphic chip: 8-bit weights, per-hop
//! transmission delay, greedy core placement and a static/dynamic power
//! estimate. The power numbers come from calibrated parameters, not from
//! any device.

use serde::{Deserialize, Serialize};

use crate::error::{QuartzError, Result};
use crate::snn::SpikingNetwork;

/// Per-layer symmetric 8-bit weights: `s = max|w| / 127`, each weight
/// rounded half-to-even to a multiple of `s`. Readout weights are
/// recomputed from the quantized weights. All-zero layers are untouched.
pub fn quantize_weights_8bit(net: &SpikingNetwork) -> Result<SpikingNetwork> {
    net.map_weights(|layer| {
        let mut out = layer.clone();
        if let Some(w) = out.weights.as_mut() {
            let max = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if max > 0.0 {
                for v in w.data_mut() {
                    *v = (*v * 127.0 / max).round_ties_even() * max / 127.0;
                }
            }
        }
        out
    })
}

/// Adds `d` steps of latency to every hop between windows.
pub fn apply_transmission_delay(net: &SpikingNetwork, d: u32) -> SpikingNetwork {
    net.with_hop_delay(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub neurons_per_core: usize,
    pub synapses_per_core: usize,
    /// Core of every unit, stages in order.
    pub assignments: Vec<usize>,
    pub cores_used: usize,
    pub core_neurons: Vec<usize>,
    pub core_synapses: Vec<usize>,
    pub neuron_utilization: f64,
    pub synapse_utilization: f64,
}

/// Greedy first-fit of units with the given synapse counts: each unit goes
/// to the lowest-numbered core with room for it.
pub fn place_units(synapses: &[usize], neurons_per_core: usize, synapses_per_core: usize) -> Result<Placement> {
    if neurons_per_core == 0 || synapses_per_core == 0 {
        return Err(QuartzError::InvalidArgument("core capacities must be positive".into()));
    }
    let mut core_neurons: Vec<usize> = Vec::new();
    let mut core_synapses: Vec<usize> = Vec::new();
    let mut assignments = Vec::with_capacity(synapses.len());
    // Cores before `first_open` are full of neurons.
    let mut first_open = 0;
    for &syn in synapses {
        if syn > synapses_per_core {
            return Err(QuartzError::Unplaceable {
                synapses: syn,
                capacity: synapses_per_core,
            });
        }
        let found = (first_open..core_neurons.len())
            .find(|&c| core_neurons[c] < neurons_per_core && core_synapses[c] + syn <= synapses_per_core);
        let core = found.unwrap_or_else(|| {
            core_neurons.push(0);
            core_synapses.push(0);
            core_neurons.len() - 1
        });
        core_neurons[core] += 1;
        core_synapses[core] += syn;
        assignments.push(core);
        while first_open < core_neurons.len() && core_neurons[first_open] == neurons_per_core {
            first_open += 1;
        }
    }
    let cores_used = core_neurons.len();
    let total_neurons: usize = core_neurons.iter().sum();
    let total_synapses: usize = core_synapses.iter().sum();
    let denom = cores_used.max(1) as f64;
    Ok(Placement {
        neurons_per_core,
        synapses_per_core,
        assignments,
        cores_used,
        core_neurons,
        core_synapses,
        neuron_utilization: total_neurons as f64 / (denom * neurons_per_core as f64),
        synapse_utilization: total_synapses as f64 / (denom * synapses_per_core as f64),
    })
}

/// Synapses held by each unit of `net`: its fan-in, plus the readout and
/// rectifier synapses of spiking units.
pub fn unit_synapses(net: &SpikingNetwork) -> Vec<usize> {
    let mut out = Vec::with_capacity(net.unit_count());
    for stage in net.stages() {
        let extra = stage.spiking().map_or(0, |l| 1 + usize::from(l.rectify));
        out.extend(stage.fan_in().into_iter().map(|f| f + extra));
    }
    out
}

pub fn place_cores(net: &SpikingNetwork, neurons_per_core: usize, synapses_per_core: usize) -> Result<Placement> {
    place_units(&unit_synapses(net), neurons_per_core, synapses_per_core)
}

/// Cost-model parameters. The defaults reproduce the MNIST column of the
/// published power breakdown (11 cores, 91 steps, 177k operations).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerParams {
    pub static_mw_per_core: f64,
    /// Static power of the host CPUs, independent of the core count.
    pub overhead_mw: f64,
    /// Dynamic power of the host CPUs while an inference runs.
    pub host_dynamic_mw: f64,
    pub dynamic_uj_per_op: f64,
    pub step_us: f64,
}

impl Default for PowerParams {
    fn default() -> Self {
        PowerParams {
            static_mw_per_core: 5.09 / 11.0,
            overhead_mw: 0.14,
            host_dynamic_mw: 22.66,
            dynamic_uj_per_op: 9.29 * 4.91 / 177_000.0,
            step_us: 4910.0 / 91.0,
        }
    }
}

impl PowerParams {
    fn validate(&self) -> Result<()> {
        let all = [
            self.static_mw_per_core,
            self.overhead_mw,
            self.host_dynamic_mw,
            self.dynamic_uj_per_op,
            self.step_us,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) || self.step_us == 0.0 {
            return Err(QuartzError::InvalidArgument(format!("invalid power parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSplit {
    pub host_mw: f64,
    pub cores_mw: f64,
    pub total_mw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerReport {
    pub model: String,
    pub cores_used: usize,
    pub steps: u64,
    pub operations: f64,
    #[serde(rename = "static")]
    pub static_power: PowerSplit,
    pub dynamic: PowerSplit,
    pub total_mw: f64,
    pub latency_ms: f64,
    pub energy_per_inference_uj: f64,
    pub dynamic_energy_uj: f64,
    pub edp_ujs: f64,
}

/// Energy-delay product in µJ·s.
pub fn edp(energy_uj: f64, latency_ms: f64) -> f64 {
    energy_uj * latency_ms / 1000.0
}

/// Power and latency of one inference taking `steps` time steps and
/// `operations` additions on `placement.cores_used` cores.
pub fn estimate_power(placement: &Placement, operations: f64, steps: u64, params: &PowerParams) -> Result<PowerReport> {
    params.validate()?;
    if !(operations >= 0.0) {
        return Err(QuartzError::InvalidArgument(format!("operation count {operations}")));
    }
    let latency_ms = steps as f64 * params.step_us / 1000.0;
    let static_cores = placement.cores_used as f64 * params.static_mw_per_core;
    let static_power = PowerSplit {
        host_mw: params.overhead_mw,
        cores_mw: static_cores,
        total_mw: params.overhead_mw + static_cores,
    };
    let core_energy = operations * params.dynamic_uj_per_op;
    let dynamic_cores = if latency_ms > 0.0 { core_energy / latency_ms } else { 0.0 };
    let host = if operations > 0.0 { params.host_dynamic_mw } else { 0.0 };
    let dynamic = PowerSplit {
        host_mw: host,
        cores_mw: dynamic_cores,
        total_mw: host + dynamic_cores,
    };
    let total_mw = static_power.total_mw + dynamic.total_mw;
    let energy = total_mw * latency_ms;
    Ok(PowerReport {
        model: "cost model with calibrated parameters; not a device measurement".into(),
        cores_used: placement.cores_used,
        steps,
        operations,
        static_power,
        dynamic,
        total_mw,
        latency_ms,
        energy_per_inference_uj: energy,
        dynamic_energy_uj: dynamic.total_mw * latency_ms,
        edp_ujs: edp(energy, latency_ms),
    })
}
