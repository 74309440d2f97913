//! Operation counts, the addition/MAC energy model and early-spike
//! statistics.

use serde::{Deserialize, Serialize};

use crate::error::{QuartzError, Result};
use crate::snn::{AggregateResult, RunResult, SpikingNetwork};

/// Additions needed for one inference: `omega = sigma + 2 * nu * T_max`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    /// Synaptic events of spikes that carry a non-zero value, plus one
    /// readout and (when rectified) one rectifier event per unit.
    pub sigma: u64,
    /// As `sigma`, also counting zero-valued spikes.
    pub sigma_dense: u64,
    pub nu: u64,
    pub t_max: u32,
    pub omega: u64,
    pub spikes: u64,
    /// Membrane integrations actually performed by the simulator.
    pub integrations: u64,
    /// `sigma` split by the stage receiving the events.
    pub sigma_per_stage: Vec<u64>,
}

impl OpCount {
    /// Builds a count from its terms alone.
    pub fn from_terms(sigma: u64, nu: u64, t_max: u32) -> Self {
        OpCount {
            sigma,
            sigma_dense: sigma,
            nu,
            t_max,
            omega: omega(sigma, nu, t_max),
            spikes: 0,
            integrations: 0,
            sigma_per_stage: vec![sigma],
        }
    }

    /// Additions that change a unit's state: one per synaptic event of a
    /// non-zero spike and one per membrane integration. Zero-valued spikes
    /// arrive together with the readout spike and cancel against it.
    pub fn trace_exact_additions(&self) -> u64 {
        self.sigma + self.integrations
    }
}

pub fn omega(sigma: u64, nu: u64, t_max: u32) -> u64 {
    sigma + 2 * nu * u64::from(t_max)
}

/// Recounts synaptic events from the spikes in `result` and the fanout
/// lists of `net`, independently of the simulator's own tally.
pub fn count_ops(result: &RunResult, net: &SpikingNetwork) -> Result<OpCount> {
    let stages = net.stages();
    if result.layers.len() != stages.len() || result.input_spikes.len() != net.encoded_units() {
        return Err(QuartzError::Shape("run result does not belong to this network".into()));
    }
    let t = i64::from(net.t_max());
    let mut per_stage = vec![0u64; stages.len()];
    let mut dense = 0u64;
    for (unit, &s) in result.input_spikes.iter().enumerate() {
        let fanout = net.fanout(None, unit) as u64;
        dense += fanout;
        if t - i64::from(s) != 0 {
            per_stage[0] += fanout;
        }
    }
    for (k, run) in result.layers.iter().enumerate() {
        for (unit, level) in run.levels.iter().enumerate() {
            let Some(level) = level else { continue };
            let fanout = net.fanout(Some(k), unit) as u64;
            dense += fanout;
            if *level != 0 && k + 1 < stages.len() {
                per_stage[k + 1] += fanout;
            }
        }
    }
    for (k, stage) in stages.iter().enumerate() {
        if let Some(layer) = stage.spiking() {
            let n = stage.units() as u64;
            let extra = if layer.rectify { 2 * n } else { n };
            per_stage[k] += extra;
            dense += extra;
        }
    }
    let sigma: u64 = per_stage.iter().sum();
    let nu = net.unit_count() as u64;
    Ok(OpCount {
        sigma,
        sigma_dense: dense,
        nu,
        t_max: net.t_max(),
        omega: omega(sigma, nu, net.t_max()),
        spikes: result.total_spikes() as u64,
        integrations: result.integrations,
        sigma_per_stage: per_stage,
    })
}

fn check_bits(b1: u32, b2: u32) -> Result<(f64, f64)> {
    if b1 == 0 || b2 == 0 {
        return Err(QuartzError::InvalidArgument(format!(
            "bitwidths must be positive, got ({b1}, {b2})"
        )));
    }
    Ok((f64::from(b1.max(b2)), f64::from(b1.min(b2))))
}

/// Cost of an addition of a `b1`-bit and a `b2`-bit operand:
/// `max(b1, b2) + (b1 - b2) / 2` with `b1 >= b2`.
pub fn energy_add(b1: u32, b2: u32) -> Result<f64> {
    let (hi, lo) = check_bits(b1, b2)?;
    Ok(hi + (hi - lo) / 2.0)
}

/// Cost of a multiply-accumulate: `b1 * b2`.
pub fn energy_mac(b1: u32, b2: u32) -> Result<f64> {
    let (hi, lo) = check_bits(b1, b2)?;
    Ok(hi * lo)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bitwidths {
    pub ann: (u32, u32),
    pub snn: (u32, u32),
}

impl Default for Bitwidths {
    fn default() -> Self {
        Bitwidths {
            ann: (8, 8),
            snn: (16, 8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub ann_macs: u64,
    pub ann_bitwidth: (u32, u32),
    pub snn_adds: f64,
    pub snn_bitwidth: (u32, u32),
    pub ann_energy: f64,
    pub snn_energy: f64,
    pub ratio: f64,
}

/// Dynamic-energy comparison of `ann_macs` MACs against `snn_adds`
/// additions (an `omega`, possibly averaged over samples).
pub fn energy_report(ann_macs: u64, snn_adds: f64, bits: Bitwidths) -> Result<EnergyReport> {
    if !(snn_adds > 0.0) || ann_macs == 0 {
        return Err(QuartzError::InvalidArgument(
            "operation counts must be positive".into(),
        ));
    }
    let ann_energy = ann_macs as f64 * energy_mac(bits.ann.0, bits.ann.1)?;
    let snn_energy = snn_adds * energy_add(bits.snn.0, bits.snn.1)?;
    Ok(EnergyReport {
        ann_macs,
        ann_bitwidth: bits.ann,
        snn_adds,
        snn_bitwidth: bits.snn,
        ann_energy,
        snn_energy,
        ratio: ann_energy / snn_energy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEarly {
    pub stage: usize,
    pub flagged: u64,
    pub units: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlySpikeStats {
    pub flagged: u64,
    pub units: u64,
    pub fraction: f64,
    pub per_stage: Vec<StageEarly>,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Fraction of spiking units that fired before their decoding phase,
/// overall and per stage. Pooling stages never fire early and are left out.
pub fn early_spike_stats(results: &[RunResult]) -> EarlySpikeStats {
    let stages = results.first().map_or(0, |r| r.layers.len());
    let mut per_stage = Vec::new();
    for k in 0..stages {
        if !results[0].layers[k].spiking {
            continue;
        }
        let flagged = results.iter().map(|r| r.layers[k].early_count() as u64).sum();
        let units = results.iter().map(|r| r.layers[k].spike_times.len() as u64).sum();
        per_stage.push(StageEarly {
            stage: k,
            flagged,
            units,
            fraction: ratio(flagged, units),
        });
    }
    let flagged = per_stage.iter().map(|s| s.flagged).sum();
    let units = per_stage.iter().map(|s| s.units).sum();
    EarlySpikeStats {
        flagged,
        units,
        fraction: ratio(flagged, units),
        per_stage,
    }
}

/// One row of a T_max or percentile sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dataset: String,
    #[serde(rename = "T_max")]
    pub t_max: u32,
    pub percentile: f64,
    pub error: f64,
    pub omega: f64,
    pub sigma: f64,
    pub spikes: f64,
    pub early_fraction: f64,
    pub ann_macs: u64,
    pub energy_ratio: f64,
}

impl SweepRow {
    /// Summarizes a dataset run; counts are per-sample means.
    pub fn from_aggregate(
        dataset: &str,
        net: &SpikingNetwork,
        percentile: f64,
        agg: &AggregateResult,
        ann_macs: u64,
        bits: Bitwidths,
    ) -> Result<Self> {
        let nu = net.unit_count() as f64;
        let omega = agg.mean_synaptic_events + 2.0 * nu * f64::from(net.t_max());
        Ok(SweepRow {
            dataset: dataset.to_string(),
            t_max: net.t_max(),
            percentile,
            error: 1.0 - agg.accuracy,
            omega,
            sigma: agg.mean_synaptic_events,
            spikes: agg.mean_spikes_per_sample,
            early_fraction: agg.early_spike_fraction,
            ann_macs,
            energy_ratio: energy_report(ann_macs, omega, bits)?.ratio,
        })
    }
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let err = |e: csv::Error| QuartzError::InvalidArgument(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(|e| QuartzError::InvalidArgument(format!("csv: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AnnModel, Layer};
    use crate::snn::{convert, simulate, ConversionOptions, TraceLevel};
    use crate::tensor::Tensor;

    #[test]
    fn omega_terms() {
        let table = OpCount::from_terms(38_000, 4_400, 16);
        assert_eq!(table.omega, 178_800);
        assert!((table.omega as f64 - 177_000.0).abs() / 177_000.0 < 0.015);
        assert_eq!(OpCount::from_terms(3, 1, 4).omega, 3 + 8);
        let a = OpCount::from_terms(100, 50, 8);
        let b = OpCount::from_terms(100, 50, 16);
        assert_eq!(b.omega - b.sigma, 2 * (a.omega - a.sigma));
    }

    #[test]
    fn energy_formulas() {
        assert_eq!(energy_add(8, 8).unwrap(), 8.0);
        assert_eq!(energy_add(16, 8).unwrap(), 20.0);
        assert_eq!(energy_add(8, 16).unwrap(), 20.0);
        assert_eq!(energy_mac(8, 8).unwrap(), 64.0);
        assert!(energy_add(0, 8).is_err());
        let bits = Bitwidths { ann: (8, 8), snn: (8, 8) };
        let r = energy_report(101_632, 20_000.0, bits).unwrap();
        assert!((r.ratio - 101_632.0 * 64.0 / 160_000.0).abs() < 1e-12);
        assert_eq!(energy_report(500, 500.0, bits).unwrap().ratio, 8.0);
    }

    fn toy() -> SpikingNetwork {
        let w = Tensor::new(vec![2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let model = AnnModel::new("toy", vec![2], vec![Layer::dense(w, Tensor::zeros(vec![2]), true).unwrap()]).unwrap();
        convert(&model, 16, ConversionOptions::default()).unwrap()
    }

    #[test]
    fn sigma_matches_the_simulator() {
        let net = toy();
        let run = simulate(&net, &Tensor::vector(vec![0.75, 0.25]).unwrap(), &TraceLevel::Off).unwrap();
        let ops = count_ops(&run, &net).unwrap();
        // Two input spikes of fanout 2, one readout and one rectifier per unit.
        assert_eq!(ops.sigma, 4 + 4);
        assert_eq!(ops.sigma, run.synaptic_events);
        assert_eq!(ops.sigma_dense, run.synaptic_events_dense);
        assert_eq!(ops.sigma, ops.sigma_per_stage.iter().sum::<u64>());
        assert_eq!(ops.omega, ops.sigma + 2 * 2 * 16);
        assert!(ops.trace_exact_additions() <= ops.omega);

        let zero = simulate(&net, &Tensor::vector(vec![0.0, 0.0]).unwrap(), &TraceLevel::Off).unwrap();
        let ops = count_ops(&zero, &net).unwrap();
        assert_eq!(ops.sigma, 4);
        assert_eq!(ops.sigma_dense, 8);
    }

    #[test]
    fn overshoot_is_flagged_early() {
        // +2 arrives at step 0, -2 only at the end of the window.
        let w = Tensor::new(vec![1, 2], vec![2.0, -2.0]).unwrap();
        let model = AnnModel::new("o", vec![2], vec![Layer::dense(w, Tensor::zeros(vec![1]), true).unwrap()]).unwrap();
        let net = convert(&model, 16, ConversionOptions::default()).unwrap();
        let run = simulate(&net, &Tensor::vector(vec![1.0, 0.01]).unwrap(), &TraceLevel::Off).unwrap();
        let stats = early_spike_stats(&[run]);
        assert_eq!(stats.flagged, 1);
        assert_eq!(stats.fraction, 1.0);

        let clean = simulate(&toy(), &Tensor::vector(vec![0.5, 0.5]).unwrap(), &TraceLevel::Off).unwrap();
        assert_eq!(early_spike_stats(&[clean]).fraction, 0.0);
    }
}
