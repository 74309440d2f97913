use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;

use quartz_core::data::{default_mnist_dir, Dataset, Split};
use quartz_core::hwcost::{self, PowerParams, PowerReport};
use quartz_core::metrics::{self, Bitwidths, EnergyReport, OpCount, SweepRow};
use quartz_core::model::{count_ann_macs, load_model, save_model, AnnModel, Layer};
use quartz_core::normalize::{self, NormalizationReport};
use quartz_core::oracle::{self, DiffReport, OracleResult};
use quartz_core::snn::{
    self, classify, AggregateResult, Classification, ConversionOptions, NetworkSpec, SpikingNetwork, TraceLevel,
};
use quartz_core::train::{self, EpochStats, TrainConfig};
use quartz_core::Tensor;

use crate::manifest::{emit, RunManifest};
use crate::{
    Command, ConversionArgs, ConvertArgs, DataArgs, HwcostArgs, NormalizeArgs, OracleArgs, RunArgs, SplitArg,
    SweepPercentileArgs, SweepTmaxArgs, ToyArgs, TrainArgs,
};

pub fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train(a) => train_cmd(&a),
        Command::Normalize(a) => normalize_cmd(&a),
        Command::Convert(a) => convert_cmd(&a),
        Command::Run(a) => run_cmd(&a),
        Command::Oracle(a) => oracle_cmd(&a),
        Command::Diff(a) => return diff_cmd(&a),
        Command::SweepTmax(a) => sweep_tmax_cmd(&a),
        Command::SweepPercentile(a) => sweep_percentile_cmd(&a),
        Command::Hwcost(a) => hwcost_cmd(&a),
        Command::Toy(a) => toy_cmd(&a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn mnist_dir(data: &Option<PathBuf>) -> PathBuf {
    data.clone().unwrap_or_else(default_mnist_dir)
}

fn load_split(data: &Option<PathBuf>, split: Split, limit: Option<usize>) -> Result<Dataset> {
    let dir = mnist_dir(data);
    let ds = Dataset::load(&dir, split).with_context(|| format!("loading MNIST from {}", dir.display()))?;
    Ok(match limit {
        Some(n) => ds.take(n),
        None => ds,
    })
}

fn calibration_set(data: &Option<PathBuf>, samples: usize, seed: u64, shape: &[usize]) -> Result<Vec<Tensor>> {
    ensure!(samples > 0, "--samples must be positive");
    let train = load_split(data, Split::Train, None)?;
    Ok(train.sample(samples, seed).tensors(shape)?)
}

/// Samples selected by `--input` or `--data`, shaped for `shape`.
struct Samples {
    inputs: Vec<Tensor>,
    labels: Option<Vec<usize>>,
    source: Option<PathBuf>,
}

impl Samples {
    fn single(&self) -> bool {
        self.labels.is_none()
    }
}

fn samples(args: &DataArgs, shape: &[usize]) -> Result<Samples> {
    if let Some(text) = &args.input {
        let values = text
            .split(',')
            .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad input value {v:?}")))
            .collect::<Result<Vec<_>>>()?;
        let input = Tensor::new(shape.to_vec(), values).context("input does not match the network")?;
        return Ok(Samples {
            inputs: vec![input],
            labels: None,
            source: None,
        });
    }
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let ds = load_split(&args.data, split, args.limit)?;
    Ok(Samples {
        inputs: ds.tensors(shape)?,
        labels: Some(ds.labels.clone()),
        source: Some(mnist_dir(&args.data)),
    })
}

fn with_source(manifest: RunManifest, s: &Samples) -> Result<RunManifest> {
    match &s.source {
        Some(dir) => manifest.input(dir),
        None => Ok(manifest),
    }
}

#[derive(Serialize)]
struct NetworkFile<'a> {
    manifest: &'a RunManifest,
    network: &'a NetworkSpec,
}

fn load_network(path: &Path) -> Result<SpikingNetwork> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(inner) = value.get_mut("network") {
        value = inner.take();
    }
    let spec: NetworkSpec = serde_json::from_value(value).with_context(|| format!("{} is not a network", path.display()))?;
    Ok(SpikingNetwork::from_spec(spec)?)
}

fn options(args: &ConversionArgs) -> ConversionOptions {
    ConversionOptions {
        rectify_last: !args.no_rectify_last,
        first_layer_float: args.first_layer_float,
        negative_extension: args.ext,
    }
}

fn toy_model() -> Result<AnnModel> {
    let w = Tensor::new(vec![2, 2], vec![1.0, -1.0, -1.0, 1.0])?;
    let layer = Layer::dense(w, Tensor::zeros(vec![2]), true)?;
    Ok(AnnModel::new("toy", vec![2], vec![layer])?)
}

fn toy_cmd(a: &ToyArgs) -> Result<()> {
    save_model(&toy_model()?, &a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    architecture: &'a str,
    train_samples: usize,
    test_accuracy: f64,
    history: &'a [EpochStats],
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let train = load_split(&a.data, Split::Train, a.limit)?;
    let test = load_split(&a.data, Split::Test, None)?;
    let config = TrainConfig {
        architecture: a.arch.clone(),
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let (model, history) = train::train_model(&config, &train, None)?;
    let xs = test.tensors(model.input_shape())?;
    let test_accuracy = train::evaluate(&model, &xs, &test.labels)?;
    save_model(&model, &a.out)?;
    let manifest = RunManifest::new("train", a)?.input(&mnist_dir(&a.data))?;
    let report = TrainReport {
        architecture: &a.arch,
        train_samples: train.len(),
        test_accuracy,
        history: &history,
    };
    emit(&manifest, &report, a.report.as_deref())
}

fn normalize_cmd(a: &NormalizeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let calib = calibration_set(&a.data, a.samples, a.seed, model.input_shape())?;
    let (normalized, scales) = if a.legacy {
        normalize::legacy_weight_norm(&model, &calib, a.percentile)?
    } else {
        normalize::normalize_activations(&model, &calib, a.percentile, a.strict)?
    };
    save_model(&normalized, &a.out)?;
    let report: NormalizationReport =
        normalize::normalization_report(&model, &normalized, &calib, &scales, a.percentile, 2000)?;
    if let Some(path) = &a.pairs_csv {
        let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        report.write_pairs_csv(file)?;
    }
    let manifest = RunManifest::new("normalize", a)?.input(&a.model)?.input(&mnist_dir(&a.data))?;
    emit(&manifest, &report, a.report.as_deref())
}

fn convert_cmd(a: &ConvertArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let net = snn::convert(&model, a.conversion.tmax, options(&a.conversion))?.with_hop_delay(a.delay);
    let manifest = RunManifest::new("convert", a)?.input(&a.model)?;
    let mut text = serde_json::to_string_pretty(&NetworkFile {
        manifest: &manifest,
        network: net.spec(),
    })?;
    text.push('\n');
    fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))
}

#[derive(Serialize)]
struct StageReport {
    stage: usize,
    kind: &'static str,
    window: usize,
    offset: i64,
    spike_times: Vec<Option<u64>>,
    local_times: Vec<Option<i64>>,
    values: Vec<Option<f64>>,
    early: Vec<bool>,
    forced: Vec<bool>,
}

#[derive(Serialize)]
struct SampleReport {
    classification: Option<Classification>,
    first_output_step: Option<u64>,
    total_steps: u64,
    input_spikes: Vec<u32>,
    input_clamped: usize,
    ops: OpCount,
    stages: Vec<StageReport>,
}

#[derive(Serialize)]
struct DatasetReport {
    aggregate: AggregateResult,
    ann_accuracy: f64,
    ann_macs: u64,
    mean_omega: f64,
    energy: EnergyReport,
}

fn run_cmd(a: &RunArgs) -> Result<()> {
    let net = load_network(&a.network)?;
    let s = samples(&a.inputs, net.input_shape())?;
    let manifest = with_source(RunManifest::new("run", a)?.input(&a.network)?, &s)?;
    match &s.labels {
        None => {
            let trace = if a.trace.is_some() { TraceLevel::All } else { TraceLevel::Off };
            let run = snn::simulate(&net, &s.inputs[0], &trace)?;
            if let Some(path) = &a.trace {
                let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
                snn::write_trace_csv(&run.trace, file)?;
            }
            let t = i64::from(net.t_max());
            let stages = run
                .layers
                .iter()
                .enumerate()
                .map(|(k, l)| StageReport {
                    stage: k,
                    kind: if l.spiking { "spiking" } else { "pool" },
                    window: l.window,
                    offset: l.offset,
                    spike_times: l.spike_times.clone(),
                    local_times: l.spike_times.iter().map(|s| s.map(|s| s as i64 - l.offset)).collect(),
                    values: l.levels.iter().map(|v| v.map(|v| v as f64 / t as f64)).collect(),
                    early: l.early.clone(),
                    forced: l.forced.clone(),
                })
                .collect();
            let report = SampleReport {
                classification: classify(&run).ok(),
                first_output_step: run.first_output_step,
                total_steps: run.total_steps,
                input_spikes: run.input_spikes.clone(),
                input_clamped: run.input_clamped,
                ops: metrics::count_ops(&run, &net)?,
                stages,
            };
            emit(&manifest, &report, a.report.as_deref())
        }
        Some(labels) => {
            ensure!(a.trace.is_none(), "--trace needs a single --input");
            let aggregate = snn::run_dataset(&net, &s.inputs, labels)?;
            let ann = net.to_model()?;
            let macs = count_ann_macs(&ann);
            let mean_omega = aggregate.mean_synaptic_events + 2.0 * net.unit_count() as f64 * f64::from(net.t_max());
            let report = DatasetReport {
                ann_accuracy: train::evaluate(&ann, &s.inputs, labels)?,
                ann_macs: macs,
                mean_omega,
                energy: metrics::energy_report(macs, mean_omega, Bitwidths::default())?,
                aggregate,
            };
            emit(&manifest, &report, a.report.as_deref())
        }
    }
}

#[derive(Serialize)]
struct OracleDatasetReport {
    samples: usize,
    accuracy: f64,
    predicted_early_units: usize,
}

fn oracle_cmd(a: &OracleArgs) -> Result<()> {
    let net = load_network(&a.network)?;
    let s = samples(&a.inputs, net.input_shape())?;
    let manifest = with_source(RunManifest::new("oracle", a)?.input(&a.network)?, &s)?;
    let results: Vec<OracleResult> = s
        .inputs
        .iter()
        .map(|x| oracle::oracle_forward(&net, x))
        .collect::<quartz_core::Result<_>>()?;
    match &s.labels {
        None => emit(&manifest, &results[0], a.report.as_deref()),
        Some(labels) => {
            let correct = results.iter().zip(labels).filter(|(r, &l)| r.label == Some(l)).count();
            let report = OracleDatasetReport {
                samples: results.len(),
                accuracy: correct as f64 / results.len().max(1) as f64,
                predicted_early_units: results.iter().map(OracleResult::predicted_early).sum(),
            };
            emit(&manifest, &report, a.report.as_deref())
        }
    }
}

#[derive(Serialize)]
struct DiffSummary {
    samples: usize,
    samples_with_early_spikes: usize,
    mismatches: usize,
    unexplained_mismatches: usize,
    early_spikes: usize,
    max_abs_delta: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    detail: Option<DiffReport>,
}

fn diff_cmd(a: &OracleArgs) -> Result<ExitCode> {
    let net = load_network(&a.network)?;
    let s = samples(&a.inputs, net.input_shape())?;
    let manifest = with_source(RunManifest::new("diff", a)?.input(&a.network)?, &s)?;
    let reports: Vec<DiffReport> = snn::map_dataset(&net, &s.inputs, |i, run| {
        oracle::oracle_forward(&net, &s.inputs[i]).and_then(|o| oracle::diff(&net, run, &o))
    })?
    .into_iter()
    .collect::<quartz_core::Result<_>>()?;
    let summary = DiffSummary {
        samples: reports.len(),
        samples_with_early_spikes: reports.iter().filter(|r| r.early_spikes > 0).count(),
        mismatches: reports.iter().map(|r| r.mismatches).sum(),
        unexplained_mismatches: reports.iter().map(|r| r.unexplained_mismatches).sum(),
        early_spikes: reports.iter().map(|r| r.early_spikes).sum(),
        max_abs_delta: reports.iter().map(|r| r.max_abs_delta).max().unwrap_or(0),
        detail: if s.single() { reports.into_iter().next() } else { None },
    };
    if let Some(path) = &a.report {
        emit(&manifest, &summary, Some(path))?;
    }
    println!("mismatches: {}", summary.mismatches);
    if summary.unexplained_mismatches > 0 {
        eprintln!(
            "error: {} mismatches are not downstream of an early spike",
            summary.unexplained_mismatches
        );
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn write_csv(rows: &[SweepRow], out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            metrics::write_sweep_csv(rows, file)?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            metrics::write_sweep_csv(rows, &mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn sweep_tmax_cmd(a: &SweepTmaxArgs) -> Result<()> {
    ensure!(!a.tmax_list.is_empty(), "--tmax-list is empty");
    let model = load_model(&a.model)?;
    let percentile = model.normalization.as_ref().map_or(f64::NAN, |n| n.percentile);
    let test = load_split(&a.data, Split::Test, a.limit)?;
    let xs = test.tensors(model.input_shape())?;
    let macs = count_ann_macs(&model);
    let mut rows = Vec::new();
    for &t in &a.tmax_list {
        ensure!(t > 0, "T_max must be positive");
        let net = snn::convert(&model, t, ConversionOptions::default())?;
        let agg = snn::run_dataset(&net, &xs, &test.labels)?;
        rows.push(SweepRow::from_aggregate(&a.dataset, &net, percentile, &agg, macs, Bitwidths::default())?);
    }
    write_csv(&rows, a.out.as_deref())
}

fn sweep_percentile_cmd(a: &SweepPercentileArgs) -> Result<()> {
    ensure!(!a.percentiles.is_empty(), "--percentiles is empty");
    let model = load_model(&a.model)?;
    let calib = calibration_set(&a.data, a.samples, a.seed, model.input_shape())?;
    let test = load_split(&a.data, Split::Test, a.limit)?;
    let xs = test.tensors(model.input_shape())?;
    let macs = count_ann_macs(&model);
    let mut rows = Vec::new();
    for &p in &a.percentiles {
        let (normalized, _) = normalize::normalize_activations(&model, &calib, p, false)?;
        let net = snn::convert(&normalized, a.tmax, ConversionOptions::default())?;
        let agg = snn::run_dataset(&net, &xs, &test.labels)?;
        rows.push(SweepRow::from_aggregate(&a.dataset, &net, p, &agg, macs, Bitwidths::default())?);
    }
    write_csv(&rows, a.out.as_deref())
}

#[derive(Serialize)]
struct PlacementSummary {
    cores_used: usize,
    neurons_per_core: usize,
    synapses_per_core: usize,
    neuron_utilization: f64,
    synapse_utilization: f64,
    core_neurons: Vec<usize>,
    core_synapses: Vec<usize>,
}

#[derive(Serialize)]
struct HwcostReport {
    quantized: bool,
    hop_delay: u32,
    placement: PlacementSummary,
    mean_operations: f64,
    mean_first_output_step: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy_unquantized: Option<f64>,
    power: PowerReport,
}

fn hwcost_cmd(a: &HwcostArgs) -> Result<()> {
    let params = match &a.power_params {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<PowerParams>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => PowerParams::default(),
    };
    let base = load_network(&a.network)?;
    let net = if a.quantize { hwcost::quantize_weights_8bit(&base)? } else { base.clone() };
    let net = hwcost::apply_transmission_delay(&net, a.delay);
    let placement = hwcost::place_cores(&net, a.neurons_per_core, a.synapses_per_core)?;
    let s = samples(&a.inputs, net.input_shape())?;
    let mut manifest = with_source(RunManifest::new("hwcost", a)?.input(&a.network)?, &s)?;
    if let Some(path) = &a.power_params {
        manifest = manifest.input(path)?;
    }

    let per_sample = snn::map_dataset(&net, &s.inputs, |_, run| {
        metrics::count_ops(run, &net).map(|ops| (ops.omega, run.total_steps, run.first_output_step, classify(run)))
    })?
    .into_iter()
    .collect::<quartz_core::Result<Vec<_>>>()?;
    let n = per_sample.len().max(1) as f64;
    let mean_ops = per_sample.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let steps = per_sample.iter().map(|p| p.1).max().unwrap_or(0);
    let firsts: Vec<u64> = per_sample.iter().filter_map(|p| p.2).collect();
    let mean_first = firsts.iter().sum::<u64>() as f64 / firsts.len().max(1) as f64;

    let (accuracy, accuracy_unquantized) = match &s.labels {
        Some(labels) => {
            let correct = per_sample
                .iter()
                .zip(labels)
                .filter(|(p, &l)| matches!(&p.3, Ok(c) if c.label == l))
                .count();
            let before = if a.quantize {
                Some(snn::run_dataset(&base, &s.inputs, labels)?.accuracy)
            } else {
                None
            };
            (Some(correct as f64 / n), before)
        }
        None => (None, None),
    };
    if steps == 0 {
        bail!("no samples to estimate power from");
    }
    let report = HwcostReport {
        quantized: a.quantize,
        hop_delay: a.delay,
        power: hwcost::estimate_power(&placement, mean_ops, steps, &params)?,
        placement: PlacementSummary {
            cores_used: placement.cores_used,
            neurons_per_core: placement.neurons_per_core,
            synapses_per_core: placement.synapses_per_core,
            neuron_utilization: placement.neuron_utilization,
            synapse_utilization: placement.synapse_utilization,
            core_neurons: placement.core_neurons,
            core_synapses: placement.core_synapses,
        },
        mean_operations: mean_ops,
        mean_first_output_step: mean_first,
        accuracy,
        accuracy_unquantized,
    };
    emit(&manifest, &report, a.report.as_deref())
}
