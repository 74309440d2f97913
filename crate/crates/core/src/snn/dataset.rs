use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::SpikingNetwork;
use super::simulate::{simulate, RunResult, TraceLevel};
use crate::error::{QuartzError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub label: usize,
    /// Set when two or more units tie on both spike step and membrane.
    pub ambiguous: bool,
}

/// Earliest output spike wins; ties go to the larger membrane potential at
/// the spike step, then to the lowest index.
pub fn classify(result: &RunResult) -> Result<Classification> {
    let out = result.output();
    let mut best: Option<(usize, u64, f64)> = None;
    let mut ambiguous = false;
    for (unit, time) in out.spike_times.iter().enumerate() {
        let Some(time) = *time else { continue };
        let u = out.membrane_at_spike[unit];
        match best {
            None => best = Some((unit, time, u)),
            Some((_, bt, bu)) => {
                if time < bt || (time == bt && u > bu) {
                    best = Some((unit, time, u));
                    ambiguous = false;
                } else if time == bt && u == bu {
                    ambiguous = true;
                }
            }
        }
    }
    best.map(|(label, _, _)| Classification { label, ambiguous })
        .ok_or(QuartzError::NoOutputSpike)
}

/// Per-sample summary kept by dataset runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub predicted: Option<usize>,
    pub label: usize,
    pub ambiguous: bool,
    pub first_output_step: Option<u64>,
    pub total_steps: u64,
    pub spikes: usize,
    pub units: usize,
    pub early_spikes: usize,
    pub spiking_units: usize,
    pub synaptic_events: u64,
    pub synaptic_events_dense: u64,
    pub integrations: u64,
    pub input_spikes: usize,
}

impl SampleSummary {
    pub fn from_result(result: &RunResult, label: usize) -> Self {
        let cls = classify(result).ok();
        SampleSummary {
            predicted: cls.map(|c| c.label),
            label,
            ambiguous: cls.is_some_and(|c| c.ambiguous),
            first_output_step: result.first_output_step,
            total_steps: result.total_steps,
            spikes: result.total_spikes(),
            units: result.total_units(),
            early_spikes: result.early_spikes(),
            spiking_units: result.layers.iter().filter(|l| l.spiking).map(|l| l.spike_times.len()).sum(),
            synaptic_events: result.synaptic_events,
            synaptic_events_dense: result.synaptic_events_dense,
            integrations: result.integrations,
            input_spikes: result.input_spikes.len(),
        }
    }

    pub fn correct(&self) -> bool {
        self.predicted == Some(self.label)
    }
}

/// Dataset-level statistics; a deterministic fold over samples in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub samples: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub ambiguous: usize,
    pub no_output: usize,
    pub mean_first_spike_step: f64,
    pub mean_total_steps: f64,
    pub total_spikes: u64,
    pub total_units: u64,
    pub mean_spikes_per_sample: f64,
    pub early_spikes: u64,
    pub early_spike_fraction: f64,
    pub mean_synaptic_events: f64,
    pub mean_synaptic_events_dense: f64,
    pub mean_integrations: f64,
}

impl AggregateResult {
    pub fn from_samples(samples: &[SampleSummary]) -> Self {
        let n = samples.len().max(1) as f64;
        let with_output: Vec<u64> = samples.iter().filter_map(|s| s.first_output_step).collect();
        let correct = samples.iter().filter(|s| s.correct()).count();
        let early: u64 = samples.iter().map(|s| s.early_spikes as u64).sum();
        let spiking_units: u64 = samples.iter().map(|s| s.spiking_units as u64).sum();
        let total_spikes: u64 = samples.iter().map(|s| s.spikes as u64).sum();
        AggregateResult {
            samples: samples.len(),
            correct,
            accuracy: correct as f64 / n,
            ambiguous: samples.iter().filter(|s| s.ambiguous).count(),
            no_output: samples.iter().filter(|s| s.predicted.is_none()).count(),
            mean_first_spike_step: with_output.iter().sum::<u64>() as f64 / with_output.len().max(1) as f64,
            mean_total_steps: samples.iter().map(|s| s.total_steps).sum::<u64>() as f64 / n,
            total_spikes,
            total_units: samples.iter().map(|s| s.units as u64).sum(),
            mean_spikes_per_sample: total_spikes as f64 / n,
            early_spikes: early,
            early_spike_fraction: early as f64 / spiking_units.max(1) as f64,
            mean_synaptic_events: samples.iter().map(|s| s.synaptic_events).sum::<u64>() as f64 / n,
            mean_synaptic_events_dense: samples.iter().map(|s| s.synaptic_events_dense).sum::<u64>() as f64 / n,
            mean_integrations: samples.iter().map(|s| s.integrations).sum::<u64>() as f64 / n,
        }
    }
}

/// Runs `f` on the simulation result of every sample, in parallel, and
/// returns the outputs in input order.
pub fn map_dataset<T, F>(net: &SpikingNetwork, inputs: &[Tensor], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &RunResult) -> T + Sync,
{
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| simulate(net, x, &TraceLevel::Off).map(|r| f(i, &r)))
        .collect()
}

/// Simulates and classifies every sample.
pub fn run_dataset(net: &SpikingNetwork, inputs: &[Tensor], labels: &[usize]) -> Result<AggregateResult> {
    Ok(AggregateResult::from_samples(&run_samples(net, inputs, labels)?))
}

pub fn run_samples(net: &SpikingNetwork, inputs: &[Tensor], labels: &[usize]) -> Result<Vec<SampleSummary>> {
    if inputs.len() != labels.len() {
        return Err(QuartzError::Shape(format!(
            "{} inputs but {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    map_dataset(net, inputs, |i, r| SampleSummary::from_result(r, labels[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snn::simulate::LayerRun;

    fn result_with_output(times: Vec<Option<u64>>, membrane: Vec<f64>) -> RunResult {
        let n = times.len();
        RunResult {
            t_max: 16,
            input_spikes: vec![],
            input_clamped: 0,
            layers: vec![LayerRun {
                spiking: true,
                window: 1,
                offset: 0,
                spike_times: times,
                levels: vec![Some(0); n],
                early: vec![false; n],
                forced: vec![false; n],
                membrane_at_spike: membrane,
            }],
            synaptic_events: 0,
            synaptic_events_dense: 0,
            integrations: 0,
            total_steps: 32,
            first_output_step: None,
            trace: vec![],
        }
    }

    #[test]
    fn earliest_spike_wins() {
        let r = result_with_output(vec![Some(80), Some(77), Some(90)], vec![16.0; 3]);
        assert_eq!(classify(&r).unwrap(), Classification { label: 1, ambiguous: false });
    }

    #[test]
    fn membrane_breaks_ties() {
        let r = result_with_output(vec![Some(50), Some(50)], vec![16.1, 16.4]);
        assert_eq!(classify(&r).unwrap(), Classification { label: 1, ambiguous: false });
    }

    #[test]
    fn full_tie_is_ambiguous_lowest_index() {
        let r = result_with_output(vec![Some(32); 4], vec![-3.0; 4]);
        assert_eq!(classify(&r).unwrap(), Classification { label: 0, ambiguous: true });
    }

    #[test]
    fn no_spike_is_an_error() {
        let r = result_with_output(vec![None, None], vec![0.0; 2]);
        assert!(matches!(classify(&r), Err(QuartzError::NoOutputSpike)));
    }
}
