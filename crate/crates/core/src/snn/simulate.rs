//! Clock-driven simulation of a converted network.
//!
//! Per global step: integrate `u += c` for every live unit that has not
//! fired, test the threshold `u >= T_max`, apply the rectifier at local
//! `2 T_max`, then deliver the spikes that arrive this step. A delivery
//! changes the current from the next step on, so an input spike at local
//! `s` contributes `w * (T_max - s)` to `u(T_max)`.

use serde::{Deserialize, Serialize};

use super::fixed::{self, ONE};
use super::network::{SpikingNetwork, StageKind};
use crate::codec;
use crate::error::{QuartzError, Result};
use crate::model::apply_layer;
use crate::tensor::Tensor;

const STEP_BUDGET: u64 = 50_000_000;

/// Which units to record `(c, u)` traces for.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceLevel {
    #[default]
    Off,
    /// `(stage, unit)` pairs.
    Units(Vec<(usize, usize)>),
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub stage: usize,
    pub unit: usize,
    pub current: f64,
    pub membrane: f64,
    /// Exact fixed-point current (`ONE` = 1.0).
    pub current_fx: i64,
    pub membrane_fx: i64,
}

/// Spikes of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRun {
    pub spiking: bool,
    pub window: usize,
    /// Global step of this stage's local time 0.
    pub offset: i64,
    /// Global spike step per unit.
    pub spike_times: Vec<Option<u64>>,
    /// Decoded value numerator per unit: value = level / T_max.
    pub levels: Vec<Option<i64>>,
    /// Fired before local `T_max`.
    pub early: Vec<bool>,
    /// Fired through the rectifier.
    pub forced: Vec<bool>,
    /// Membrane potential at the spike step (before any rectifier current).
    pub membrane_at_spike: Vec<f64>,
}

impl LayerRun {
    pub fn decoded(&self, t_max: u32) -> Vec<Option<f64>> {
        self.levels
            .iter()
            .map(|l| l.map(|l| l as f64 / f64::from(t_max)))
            .collect()
    }

    pub fn spike_count(&self) -> usize {
        self.spike_times.iter().flatten().count()
    }

    pub fn early_count(&self) -> usize {
        self.early.iter().filter(|&&e| e).count()
    }
}

/// Outcome of simulating one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub t_max: u32,
    /// Encoded input spike times (global steps).
    pub input_spikes: Vec<u32>,
    /// Float-stage outputs above 1 that had to be clamped before encoding.
    pub input_clamped: usize,
    pub layers: Vec<LayerRun>,
    /// Synaptic events of value-carrying spikes plus one counter and one
    /// rectifier event per unit.
    pub synaptic_events: u64,
    /// Synaptic events including spikes that encode zero.
    pub synaptic_events_dense: u64,
    /// Membrane updates actually performed.
    pub integrations: u64,
    pub total_steps: u64,
    pub first_output_step: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceRow>,
}

impl RunResult {
    pub fn output(&self) -> &LayerRun {
        self.layers.last().expect("network has at least one stage")
    }

    pub fn total_spikes(&self) -> usize {
        self.layers.iter().map(LayerRun::spike_count).sum()
    }

    pub fn total_units(&self) -> usize {
        self.layers.iter().map(|l| l.spike_times.len()).sum()
    }

    /// Units of spiking layers that fired before their decoding phase.
    pub fn early_spikes(&self) -> usize {
        self.layers.iter().map(LayerRun::early_count).sum()
    }

    pub fn has_early_spikes(&self) -> bool {
        self.early_spikes() > 0
    }

    /// Decoded output values (`None` for a unit that never fired).
    pub fn output_values(&self) -> Vec<Option<f64>> {
        self.output().decoded(self.t_max)
    }
}

/// Encodes `input` (evaluating any float stage first) and simulates it.
pub fn simulate(net: &SpikingNetwork, input: &Tensor, trace: &TraceLevel) -> Result<RunResult> {
    let (spikes, clamped) = encode_input(net, input)?;
    let mut result = simulate_spikes(net, &spikes, trace)?;
    result.input_clamped = clamped;
    Ok(result)
}

/// Latency-encodes an input tensor; returns spike times and how many
/// float-stage values exceeded 1 and were clamped.
pub fn encode_input(net: &SpikingNetwork, input: &Tensor) -> Result<(Vec<u32>, usize)> {
    if input.shape() != net.input_shape() {
        return Err(QuartzError::Shape(format!(
            "network expects input {:?}, got {:?}",
            net.input_shape(),
            input.shape()
        )));
    }
    let t_max = net.t_max();
    if net.float_stage().is_empty() {
        let spikes = input
            .data()
            .iter()
            .map(|&p| codec::encode_value(p, t_max))
            .collect::<Result<Vec<_>>>()?;
        return Ok((spikes, 0));
    }
    let mut x = input.clone();
    for layer in net.float_stage() {
        x = apply_layer(layer, &x)?;
    }
    let mut clamped = 0;
    let spikes = x
        .data()
        .iter()
        .map(|&v| {
            let v = if v > 1.0 {
                clamped += 1;
                1.0
            } else {
                v
            };
            codec::encode_value(v, t_max)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((spikes, clamped))
}

struct StageState {
    u: Vec<i64>,
    c: Vec<i64>,
    fired: Vec<bool>,
    unfired: usize,
    traced: Vec<bool>,
}

/// Simulates one sample given encoded input spike times in `[0, T_max]`.
pub fn simulate_spikes(net: &SpikingNetwork, input_spikes: &[u32], trace: &TraceLevel) -> Result<RunResult> {
    let t_max = net.t_max();
    let t = i64::from(t_max);
    let theta = t * ONE;
    if input_spikes.len() != net.encoded_units() {
        return Err(QuartzError::Shape(format!(
            "expected {} input spikes, got {}",
            net.encoded_units(),
            input_spikes.len()
        )));
    }
    if let Some(&s) = input_spikes.iter().find(|&&s| s > t_max) {
        return Err(QuartzError::InvalidArgument(format!(
            "input spike at {s} lies outside the encoding window [0, {t_max}]"
        )));
    }
    let final_step = net.final_step();
    if final_step > STEP_BUDGET {
        return Err(QuartzError::StepBudget(STEP_BUDGET));
    }

    let stages = net.stages();
    let d = u64::from(net.hop_delay());
    let delay_into = |j: usize| if stages[j].is_spiking() { d } else { 0 };
    let offsets: Vec<i64> = stages.iter().map(|s| net.window_offset(s.window)).collect();
    let ends: Vec<i64> = (0..stages.len()).map(|j| net.window_end(j)).collect();

    let mut state: Vec<StageState> = stages
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let n = s.units();
            let traced = match trace {
                TraceLevel::Off => vec![false; n],
                TraceLevel::All => vec![s.is_spiking(); n],
                TraceLevel::Units(list) => {
                    let mut m = vec![false; n];
                    for &(st, u) in list {
                        if st == j && u < n {
                            m[u] = true;
                        }
                    }
                    m
                }
            };
            StageState {
                u: vec![0; n],
                c: vec![0; n],
                fired: vec![false; n],
                unfired: n,
                traced,
            }
        })
        .collect();
    let mut runs: Vec<LayerRun> = stages
        .iter()
        .zip(&offsets)
        .map(|(s, &offset)| {
            let n = s.units();
            LayerRun {
                spiking: s.is_spiking(),
                window: s.window,
                offset,
                spike_times: vec![None; n],
                levels: vec![None; n],
                early: vec![false; n],
                forced: vec![false; n],
                membrane_at_spike: vec![0.0; n],
            }
        })
        .collect();
    let input_levels: Vec<i64> = input_spikes.iter().map(|&s| t - i64::from(s)).collect();

    let horizon = final_step as usize + d as usize + 2;
    let mut arrivals: Vec<Vec<(u32, u32)>> = vec![Vec::new(); horizon];
    for (i, &s) in input_spikes.iter().enumerate() {
        arrivals[s as usize + delay_into(0) as usize].push((0, i as u32));
    }

    let mut synaptic_events = 0u64;
    let mut synaptic_events_dense = 0u64;
    let mut integrations = 0u64;
    let mut trace_rows = Vec::new();
    let mut fired_now: Vec<u32> = Vec::new();

    for step in 0..=final_step {
        let now = step as i64;

        // Integrate, threshold, rectify.
        for j in 0..stages.len() {
            let StageKind::Spiking(layer) = &stages[j].kind else {
                continue;
            };
            let local = now - offsets[j];
            let st = &mut state[j];
            if local < 1 || local > ends[j] || st.unfired == 0 {
                continue;
            }
            fired_now.clear();
            let run = &mut runs[j];
            for unit in 0..st.u.len() {
                if st.fired[unit] {
                    continue;
                }
                st.u[unit] += st.c[unit];
                integrations += 1;
                if st.traced[unit] {
                    trace_rows.push(TraceRow {
                        step,
                        stage: j,
                        unit,
                        current: fixed::to_f64(st.c[unit]),
                        membrane: fixed::to_f64(st.u[unit]),
                        current_fx: st.c[unit],
                        membrane_fx: st.u[unit],
                    });
                }
                if st.u[unit] >= theta {
                    fired_now.push(unit as u32);
                    run.early[unit] = local < t;
                    run.membrane_at_spike[unit] = fixed::to_f64(st.u[unit]);
                }
            }
            if local == 2 * t && layer.rectify {
                for unit in 0..st.u.len() {
                    if st.fired[unit] || st.u[unit] >= theta {
                        continue;
                    }
                    run.membrane_at_spike[unit] = fixed::to_f64(st.u[unit]);
                    st.u[unit] += layer.beta_fx[unit];
                    debug_assert!(st.u[unit] >= theta, "rectifier current too small");
                    run.forced[unit] = true;
                    fired_now.push(unit as u32);
                }
            }
            for &unit in &fired_now {
                let unit = unit as usize;
                st.fired[unit] = true;
                st.unfired -= 1;
                run.spike_times[unit] = Some(step);
                run.levels[unit] = Some(2 * t - local);
            }
            if j + 1 < stages.len() {
                let at = step as usize + delay_into(j + 1) as usize;
                if at < horizon {
                    arrivals[at].extend(fired_now.iter().map(|&u| ((j + 1) as u32, u)));
                }
            }
        }

        // Bias spike at local 0, readout counter spike at local T_max.
        for j in 0..stages.len() {
            let StageKind::Spiking(layer) = &stages[j].kind else {
                continue;
            };
            let local = now - offsets[j];
            if local == 0 {
                for (c, &b) in state[j].c.iter_mut().zip(&layer.bias_fx) {
                    *c += b;
                }
            } else if local == t {
                for (c, &w) in state[j].c.iter_mut().zip(&layer.counter_fx) {
                    *c += w;
                }
            }
        }

        // Deliver spikes arriving this step; pools relay within the step.
        let mut queue = std::mem::take(&mut arrivals[step as usize]);
        let mut qi = 0;
        while qi < queue.len() {
            let (j, pre) = queue[qi];
            qi += 1;
            let (j, pre) = (j as usize, pre as usize);
            let pre_level = if j == 0 {
                input_levels[pre]
            } else {
                runs[j - 1].levels[pre].expect("delivered spike has a level")
            };
            let (targets, weights) = stages[j].fanin.of(pre);
            synaptic_events_dense += targets.len() as u64;
            if pre_level != 0 {
                synaptic_events += targets.len() as u64;
            }
            match &stages[j].kind {
                StageKind::Spiking(_) => {
                    let local = now - offsets[j];
                    let st = &mut state[j];
                    for (&post, &w) in targets.iter().zip(weights) {
                        let post = post as usize;
                        st.c[post] += w;
                        if local < 0 {
                            st.u[post] += w * -local;
                        }
                    }
                }
                StageKind::Pool(_) => {
                    let st = &mut state[j];
                    let run = &mut runs[j];
                    for &post in targets {
                        let post = post as usize;
                        if st.fired[post] {
                            continue;
                        }
                        st.fired[post] = true;
                        st.unfired -= 1;
                        run.spike_times[post] = Some(step);
                        run.levels[post] = Some(pre_level);
                        if j + 1 < stages.len() {
                            let delay = delay_into(j + 1);
                            if delay == 0 {
                                queue.push(((j + 1) as u32, post as u32));
                            } else if (step + delay) < horizon as u64 {
                                arrivals[(step + delay) as usize].push(((j + 1) as u32, post as u32));
                            }
                        }
                    }
                }
            }
        }
    }

    // One readout and one rectifier event per unit of each spiking layer.
    for s in stages {
        if let Some(l) = s.spiking() {
            let n = s.units() as u64;
            let extra = if l.rectify { 2 * n } else { n };
            synaptic_events += extra;
            synaptic_events_dense += extra;
        }
    }

    let first_output_step = runs.last().and_then(|r| r.spike_times.iter().flatten().min().copied());
    Ok(RunResult {
        t_max,
        input_spikes: input_spikes.to_vec(),
        input_clamped: 0,
        layers: runs,
        synaptic_events,
        synaptic_events_dense,
        integrations,
        total_steps: final_step,
        first_output_step,
        trace: trace_rows,
    })
}

/// Writes trace rows as CSV with columns `step, stage, unit, c, u`.
pub fn write_trace_csv<W: std::io::Write>(rows: &[TraceRow], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "stage", "unit", "c", "u"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.stage.to_string(),
            r.unit.to_string(),
            r.current.to_string(),
            r.membrane.to_string(),
        ])?;
    }
    w.flush()
}
