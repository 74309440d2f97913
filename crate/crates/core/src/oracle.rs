//! Closed-form prediction of what the spiking network computes when no unit
//! fires early. Activations live on the `1/T_max` grid: with `a = b + Σ w q`
//! a unit fires at local `T + ceil(T (1 - a))` (never before `T`, and no
//! later than the rectifier at `2T`), representing `1 - ceil(T (1 - a)) / T`.
//!
//! All sums use the same fixed-point weights as the simulator, so the
//! prediction is exact, not approximate.

use serde::{Deserialize, Serialize};

use crate::error::{QuartzError, Result};
use crate::model::AnnModel;
use crate::snn::fixed::ONE;
use crate::snn::{self, ConversionOptions, RunResult, SpikingNetwork, StageKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleLayer {
    pub window: usize,
    /// Value numerators: activation = level / T_max.
    pub levels: Vec<Option<i64>>,
    pub spike_times: Vec<Option<u64>>,
    /// `a > 1`: the unit is expected to fire early in simulation.
    pub predicted_early: Vec<bool>,
    /// Membrane potential at the predicted spike step (fixed point).
    pub membrane_fx: Vec<i64>,
}

impl OracleLayer {
    pub fn values(&self, t_max: u32) -> Vec<Option<f64>> {
        self.levels.iter().map(|l| l.map(|l| l as f64 / f64::from(t_max))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub t_max: u32,
    pub input_levels: Vec<i64>,
    pub layers: Vec<OracleLayer>,
    pub label: Option<usize>,
}

impl OracleResult {
    pub fn output(&self) -> &OracleLayer {
        self.layers.last().expect("network has at least one stage")
    }

    pub fn predicted_early(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.predicted_early.iter().filter(|&&e| e).count())
            .sum()
    }
}

/// Oracle for an encoded input.
pub fn oracle_forward(net: &SpikingNetwork, input: &Tensor) -> Result<OracleResult> {
    let (spikes, _) = snn::encode_input(net, input)?;
    oracle_forward_spikes(net, &spikes)
}

/// Converts `model` and evaluates the oracle on `input`.
pub fn oracle_from_model(
    model: &AnnModel,
    input: &Tensor,
    t_max: u32,
    options: ConversionOptions,
) -> Result<OracleResult> {
    oracle_forward(&snn::convert(model, t_max, options)?, input)
}

pub fn oracle_forward_spikes(net: &SpikingNetwork, input_spikes: &[u32]) -> Result<OracleResult> {
    let t_max = net.t_max();
    let t = i64::from(t_max);
    if input_spikes.len() != net.encoded_units() {
        return Err(QuartzError::Shape(format!(
            "expected {} input spikes, got {}",
            net.encoded_units(),
            input_spikes.len()
        )));
    }
    let input_levels: Vec<i64> = input_spikes.iter().map(|&s| t - i64::from(s.min(t_max))).collect();
    let mut prev_levels: Vec<Option<i64>> = input_levels.iter().copied().map(Some).collect();
    let mut prev_times: Vec<Option<u64>> = input_spikes.iter().map(|&s| Some(u64::from(s))).collect();
    let theta = i128::from(t) * i128::from(ONE);

    let mut layers = Vec::with_capacity(net.stages().len());
    for (j, stage) in net.stages().iter().enumerate() {
        let n = stage.units();
        let mut out = OracleLayer {
            window: stage.window,
            levels: vec![None; n],
            spike_times: vec![None; n],
            predicted_early: vec![false; n],
            membrane_fx: vec![0; n],
        };
        match &stage.kind {
            StageKind::Spiking(layer) => {
                let mut acc: Vec<i128> = layer.bias_fx.iter().map(|&b| i128::from(t) * i128::from(b)).collect();
                for (pre, level) in prev_levels.iter().enumerate() {
                    let Some(level) = *level else { continue };
                    let (targets, weights) = stage.fanin.of(pre);
                    for (&post, &w) in targets.iter().zip(weights) {
                        acc[post as usize] += i128::from(w) * i128::from(level);
                    }
                }
                let offset = net.window_offset(stage.window);
                let end = net.window_end(j);
                for unit in 0..n {
                    let a = acc[unit];
                    let (local, membrane) = if a >= theta {
                        out.predicted_early[unit] = a > theta;
                        (t, a)
                    } else {
                        let deficit = theta - a;
                        let k = (deficit + i128::from(ONE) - 1) / i128::from(ONE);
                        let local = t + k as i64;
                        if layer.rectify && local > 2 * t {
                            (2 * t, a + i128::from(t) * i128::from(ONE))
                        } else {
                            (local, a + i128::from(k as i64) * i128::from(ONE))
                        }
                    };
                    if local > end {
                        continue;
                    }
                    out.levels[unit] = Some(2 * t - local);
                    out.spike_times[unit] = Some((offset + local) as u64);
                    out.membrane_fx[unit] = membrane as i64;
                }
            }
            StageKind::Pool(_) => {
                for (pre, level) in prev_levels.iter().enumerate() {
                    let (targets, _) = stage.fanin.of(pre);
                    for &post in targets {
                        let post = post as usize;
                        out.levels[post] = match (out.levels[post], *level) {
                            (Some(a), Some(b)) => Some(a.max(b)),
                            (a, b) => a.or(b),
                        };
                        out.spike_times[post] = match (out.spike_times[post], prev_times[pre]) {
                            (Some(a), Some(b)) => Some(a.min(b)),
                            (a, b) => a.or(b),
                        };
                    }
                }
            }
        }
        prev_levels = out.levels.clone();
        prev_times = out.spike_times.clone();
        layers.push(out);
    }

    let label = {
        let out = layers.last().expect("at least one stage");
        let mut best: Option<(usize, u64, i64)> = None;
        for (unit, time) in out.spike_times.iter().enumerate() {
            let Some(time) = *time else { continue };
            let u = out.membrane_fx[unit];
            if best.is_none_or(|(_, bt, bu)| time < bt || (time == bt && u > bu)) {
                best = Some((unit, time, u));
            }
        }
        best.map(|b| b.0)
    };

    Ok(OracleResult {
        t_max,
        input_levels,
        layers,
        label,
    })
}

/// Unit-by-unit comparison of a simulation against the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    /// `sim - oracle` spike-time difference per unit; `None` when either side
    /// has no spike.
    pub deltas: Vec<Vec<Option<i64>>>,
    pub mismatches: usize,
    /// Mismatched units that are neither early themselves nor downstream of
    /// an early unit. Zero whenever the simulator and oracle agree.
    pub unexplained_mismatches: usize,
    pub early_spikes: usize,
    pub downstream_of_early: usize,
    pub max_abs_delta: i64,
}

impl DiffReport {
    pub fn is_clean(&self) -> bool {
        self.mismatches == 0
    }
}

pub fn diff(net: &SpikingNetwork, sim: &RunResult, oracle: &OracleResult) -> Result<DiffReport> {
    if sim.layers.len() != oracle.layers.len() || sim.layers.len() != net.stages().len() {
        return Err(QuartzError::Shape(format!(
            "simulation has {} stages, oracle {}, network {}",
            sim.layers.len(),
            oracle.layers.len(),
            net.stages().len()
        )));
    }
    let mut deltas = Vec::with_capacity(sim.layers.len());
    let mut mismatches = 0;
    let mut unexplained = 0;
    let mut downstream = 0;
    let mut max_abs_delta = 0;
    let mut prev_tainted: Vec<bool> = vec![false; net.encoded_units()];
    for (j, (s, o)) in sim.layers.iter().zip(&oracle.layers).enumerate() {
        if s.spike_times.len() != o.spike_times.len() {
            return Err(QuartzError::Shape(format!("stage {j} unit counts differ")));
        }
        let stage = &net.stages()[j];
        let mut tainted = s.early.clone();
        for (pre, &t) in prev_tainted.iter().enumerate() {
            if t {
                for &post in stage.fanin.of(pre).0 {
                    tainted[post as usize] = true;
                }
            }
        }
        downstream += tainted.iter().filter(|&&t| t).count();
        let mut layer_deltas = Vec::with_capacity(s.spike_times.len());
        for unit in 0..s.spike_times.len() {
            let delta = match (s.spike_times[unit], o.spike_times[unit]) {
                (Some(a), Some(b)) => Some(a as i64 - b as i64),
                _ => None,
            };
            let mismatch = match (s.spike_times[unit], o.spike_times[unit]) {
                (Some(a), Some(b)) => a != b,
                (None, None) => false,
                _ => true,
            };
            if mismatch {
                mismatches += 1;
                if !tainted[unit] {
                    unexplained += 1;
                }
            }
            if let Some(d) = delta {
                max_abs_delta = max_abs_delta.max(d.abs());
            }
            layer_deltas.push(delta);
        }
        deltas.push(layer_deltas);
        prev_tainted = tainted;
    }
    Ok(DiffReport {
        deltas,
        mismatches,
        unexplained_mismatches: unexplained,
        early_spikes: sim.early_spikes(),
        downstream_of_early: downstream,
        max_abs_delta,
    })
}
