//! Activation normalization: rescale each parameter layer so a chosen
//! percentile of its activations lands at 1, with the bias correction that
//! keeps deeper layers consistent. Also the older data-based weight
//! normalization, kept for comparison, and diagnostics for both.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QuartzError, Result};
use crate::model::{apply_layer, AnnModel, Layer, LayerKind, NormalizationState};
use crate::snn::{convert, run_dataset, AggregateResult, ConversionOptions};
use crate::tensor::Tensor;

/// Linear-interpolation percentile: rank `p/100 * (n - 1)` on the sorted
/// values, interpolated between the neighbouring ranks.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    let mut scratch = values.to_vec();
    percentile_in_place(&mut scratch, p)
}

/// As [`percentile`], reordering `values`.
pub fn percentile_in_place(values: &mut [f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(QuartzError::InvalidArgument("percentile of an empty set".into()));
    }
    check_percentile(p)?;
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(QuartzError::NonFinite(format!("percentile input {bad}")));
    }
    let rank = p / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (rank.ceil() as usize).min(values.len() - 1);
    let (left, &mut upper, _) = values.select_nth_unstable_by(hi, f64::total_cmp);
    if lo == hi {
        return Ok(upper);
    }
    let lower = left.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(lower + (upper - lower) * (rank - lo as f64))
}

fn check_percentile(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(QuartzError::InvalidArgument(format!(
            "percentile must lie in (0, 100], got {p}"
        )));
    }
    Ok(())
}

fn check_calibration(calibration: &[Tensor]) -> Result<()> {
    if calibration.is_empty() {
        return Err(QuartzError::InvalidArgument("calibration set is empty".into()));
    }
    Ok(())
}

fn apply_all(layer: &Layer, xs: &[Tensor]) -> Result<Vec<Tensor>> {
    xs.par_iter().map(|x| apply_layer(layer, x)).collect()
}

fn batch_percentile(batch: &[Tensor], p: f64) -> Result<f64> {
    let mut all: Vec<f64> = batch.iter().flat_map(|t| t.data().iter().copied()).collect();
    percentile_in_place(&mut all, p)
}

fn scaled(layer: &Layer, weight_factor: f64, bias_factor: f64) -> Layer {
    let mut out = layer.clone();
    if let Some(w) = out.weights.as_mut() {
        w.scale(weight_factor);
    }
    if let Some(b) = out.bias.as_mut() {
        b.scale(bias_factor);
    }
    out
}

fn degenerate(layer: usize, scale: f64) -> QuartzError {
    QuartzError::DegenerateScale { layer, scale }
}

/// Normalizes every parameter layer in order. For layer `l` the activations
/// of the partially normalized prefix followed by the raw layer are
/// collected over the whole calibration set, `s` is their `p`-th
/// percentile, the weights are divided by `s` and the bias by the product
/// of all scales so far.
///
/// With `strict` set, the raw bias used to measure layer `l` is first
/// divided by the product of the earlier scales, so the percentile of the
/// finished layer is exactly 1.
///
/// Returns the new model and the per-parameter-layer scales.
pub fn normalize_activations(
    model: &AnnModel,
    calibration: &[Tensor],
    p: f64,
    strict: bool,
) -> Result<(AnnModel, Vec<f64>)> {
    check_percentile(p)?;
    check_calibration(calibration)?;
    for x in calibration {
        model.check_input(x)?;
    }
    if model.is_normalized() {
        log::warn!("model {} is already normalized; scales compose", model.name);
    }
    let mut out = model.clone();
    let mut scales = Vec::new();
    let mut product = 1.0;
    let mut xs = calibration.to_vec();
    for (i, layer) in out.layers_mut().iter_mut().enumerate() {
        if !layer.is_parameter() {
            xs = apply_all(layer, &xs)?;
            continue;
        }
        let probe = if strict { scaled(layer, 1.0, 1.0 / product) } else { layer.clone() };
        let s = batch_percentile(&apply_all(&probe, &xs)?, p)?;
        if !(s > 0.0) || !s.is_finite() {
            return Err(degenerate(i, s));
        }
        scales.push(s);
        product *= s;
        *layer = scaled(layer, 1.0 / s, 1.0 / product);
        xs = apply_all(layer, &xs)?;
    }
    out.normalization = Some(NormalizationState {
        percentile: p,
        scales: scales.clone(),
        method: if strict { "activation-strict" } else { "activation" }.into(),
    });
    Ok((out, scales))
}

/// Data-based weight normalization: `lambda_l` is the `p`-th percentile of
/// layer `l`'s activations in the original model, and both weights and
/// biases of layer `l` are multiplied by `lambda_{l-1} / lambda_l`.
///
/// The bias never sees the factors of earlier layers, so networks with
/// biases drift away from the original activations in deeper layers.
/// Returns the model and the per-layer factors `lambda_l / lambda_{l-1}`.
pub fn legacy_weight_norm(model: &AnnModel, calibration: &[Tensor], p: f64) -> Result<(AnnModel, Vec<f64>)> {
    check_percentile(p)?;
    check_calibration(calibration)?;
    for x in calibration {
        model.check_input(x)?;
    }
    let mut out = model.clone();
    let mut scales = Vec::new();
    let mut previous = 1.0;
    let mut xs = calibration.to_vec();
    for (i, layer) in out.layers_mut().iter_mut().enumerate() {
        // Activations of the original model.
        xs = apply_all(layer, &xs)?;
        if !layer.is_parameter() {
            continue;
        }
        let lambda = batch_percentile(&xs, p)?;
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(degenerate(i, lambda));
        }
        let factor = previous / lambda;
        *layer = scaled(layer, factor, factor);
        scales.push(lambda / previous);
        previous = lambda;
    }
    out.normalization = Some(NormalizationState {
        percentile: p,
        scales: scales.clone(),
        method: "legacy-weight".into(),
    });
    Ok((out, scales))
}

/// Diagnostics for one recorded layer (every layer except flatten).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub kind: String,
    /// Scale of this layer, 1 for pooling.
    pub scale: f64,
    /// Product of the scales up to and including this layer.
    pub cumulative: f64,
    /// Max |normalized * cumulative - original| over the probe set.
    pub residual: f64,
    /// Percentile of the normalized activations on the probe set.
    pub normalized_percentile: f64,
    /// (original, normalized * cumulative), capped in number.
    pub pairs: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationReport {
    pub percentile: f64,
    pub probes: usize,
    pub scales: Vec<f64>,
    pub layers: Vec<LayerDiagnostics>,
    /// Fraction of probes whose argmax is unchanged.
    pub argmax_agreement: f64,
}

impl NormalizationReport {
    pub fn max_residual(&self) -> f64 {
        self.layers.iter().map(|l| l.residual).fold(0.0, f64::max)
    }

    /// Scatter pairs as CSV: `layer,original,normalized_rescaled`.
    pub fn write_pairs_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| QuartzError::InvalidArgument(format!("csv: {e}"));
        w.write_record(["layer", "original", "normalized_rescaled"]).map_err(err)?;
        for l in &self.layers {
            for (a, b) in &l.pairs {
                w.serialize((l.layer, a, b)).map_err(err)?;
            }
        }
        w.flush().map_err(|e| QuartzError::InvalidArgument(format!("csv: {e}")))?;
        Ok(())
    }
}

/// Compares the activations of `original` and `normalized` layer by layer
/// on `probe`, rescaling the normalized ones by the cumulative product of
/// `scales`. `p` is the percentile reported per layer; at most `max_pairs`
/// scatter pairs are kept per layer.
pub fn normalization_report(
    original: &AnnModel,
    normalized: &AnnModel,
    probe: &[Tensor],
    scales: &[f64],
    p: f64,
    max_pairs: usize,
) -> Result<NormalizationReport> {
    check_calibration(probe)?;
    check_percentile(p)?;
    let kinds = |m: &AnnModel| m.layers().iter().map(|l| l.kind).collect::<Vec<_>>();
    if kinds(original) != kinds(normalized) || original.input_shape() != normalized.input_shape() {
        return Err(QuartzError::Shape("models are not structurally identical".into()));
    }
    if scales.len() != original.parameter_layers().len() {
        return Err(QuartzError::Shape(format!(
            "{} scales for {} parameter layers",
            scales.len(),
            original.parameter_layers().len()
        )));
    }
    let runs: Vec<(Vec<Tensor>, Vec<Tensor>)> = probe
        .par_iter()
        .map(|x| Ok((original.forward_all(x)?, normalized.forward_all(x)?)))
        .collect::<Result<_>>()?;

    let mut layers = Vec::new();
    let mut next_scale = scales.iter();
    let mut cumulative = 1.0;
    for (i, layer) in original.layers().iter().enumerate() {
        if matches!(layer.kind, LayerKind::Flatten) {
            continue;
        }
        let scale = if layer.is_parameter() { *next_scale.next().unwrap() } else { 1.0 };
        cumulative *= scale;
        let mut residual: f64 = 0.0;
        let mut pairs = Vec::new();
        let mut normalized_values = Vec::new();
        for (orig, norm) in &runs {
            for (&a, &b) in orig[i].data().iter().zip(norm[i].data()) {
                let rescaled = b * cumulative;
                residual = residual.max((rescaled - a).abs());
                if pairs.len() < max_pairs {
                    pairs.push((a, rescaled));
                }
                normalized_values.push(b);
            }
        }
        layers.push(LayerDiagnostics {
            layer: i,
            kind: layer.kind.name().into(),
            scale,
            cumulative,
            residual,
            normalized_percentile: percentile_in_place(&mut normalized_values, p)?,
            pairs,
        });
    }
    let agree = runs
        .iter()
        .filter(|(o, n)| o.last().unwrap().argmax() == n.last().unwrap().argmax())
        .count();
    Ok(NormalizationReport {
        percentile: p,
        probes: probe.len(),
        scales: scales.to_vec(),
        layers,
        argmax_agreement: agree as f64 / probe.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentilePoint {
    pub percentile: f64,
    pub scales: Vec<f64>,
    pub ann_accuracy: f64,
    pub snn: AggregateResult,
}

/// For each percentile: normalize, convert, and simulate the test set.
pub fn percentile_sweep(
    model: &AnnModel,
    calibration: &[Tensor],
    test_inputs: &[Tensor],
    test_labels: &[usize],
    percentiles: &[f64],
    t_max: u32,
    options: ConversionOptions,
) -> Result<Vec<PercentilePoint>> {
    percentiles
        .iter()
        .map(|&p| {
            let (normalized, scales) = normalize_activations(model, calibration, p, false)?;
            let net = convert(&normalized, t_max, options)?;
            let ann_accuracy = crate::train::evaluate(&normalized, test_inputs, test_labels)?;
            Ok(PercentilePoint {
                percentile: p,
                scales,
                ann_accuracy,
                snn: run_dataset(&net, test_inputs, test_labels)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 100.0).unwrap(), 4.0);
        assert_eq!(percentile(&[0.0, 10.0], 50.0).unwrap(), 5.0);
        let hundred: Vec<f64> = (0..100).map(f64::from).collect();
        assert_relative_eq!(percentile(&hundred, 98.5).unwrap(), 97.515, epsilon = 1e-12);
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&[1.0], 0.0).is_err());
        assert!(percentile(&[1.0], 100.5).is_err());
    }

    proptest! {
        #[test]
        fn percentile_matches_sorting(values in prop::collection::vec(-100.0f64..100.0, 1..60), p in 0.1f64..=100.0) {
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let r = p / 100.0 * (sorted.len() - 1) as f64;
            let (lo, hi) = (r.floor() as usize, r.ceil() as usize);
            let expected = sorted[lo] + (sorted[hi] - sorted[lo]) * (r - lo as f64);
            prop_assert!((percentile(&values, p).unwrap() - expected).abs() < 1e-9);
        }
    }

    fn dense(rng: &mut ChaCha8Rng, i: usize, o: usize, bias: f64, rectify: bool) -> Layer {
        let w = Tensor::new(vec![o, i], (0..o * i).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::new(vec![o], (0..o).map(|_| rng.gen_range(-bias..=bias)).collect()).unwrap();
        Layer::dense(w, b, rectify).unwrap()
    }

    fn mlp(seed: u64, bias: f64) -> (AnnModel, Vec<Tensor>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![
            dense(&mut rng, 6, 8, bias, true),
            dense(&mut rng, 8, 8, bias, true),
            dense(&mut rng, 8, 4, bias, true),
        ];
        let model = AnnModel::new("mlp", vec![6], layers).unwrap();
        let xs = (0..64)
            .map(|_| Tensor::vector((0..6).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
            .collect();
        (model, xs)
    }

    #[test]
    fn fixed_point_and_homogeneity() {
        let w = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let b = Tensor::vector(vec![0.0]).unwrap();
        let model = AnnModel::new("one", vec![2], vec![Layer::dense(w, b, true).unwrap()]).unwrap();
        let calib = vec![Tensor::vector(vec![1.0, 1.0]).unwrap()];
        let (same, scales) = normalize_activations(&model, &calib, 100.0, false).unwrap();
        assert_eq!(scales, vec![1.0]);
        assert_eq!(same.layers()[0].weights, model.layers()[0].weights);

        let w2 = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let b2 = Tensor::vector(vec![0.4]).unwrap();
        let doubled = AnnModel::new("two", vec![2], vec![Layer::dense(w2, b2, true).unwrap()]).unwrap();
        let calib = vec![Tensor::vector(vec![0.8, 0.8]).unwrap()];
        let (halved, scales) = normalize_activations(&doubled, &calib, 100.0, false).unwrap();
        assert_eq!(scales, vec![2.0]);
        assert_eq!(halved.layers()[0].weights.as_ref().unwrap().data(), &[0.5, 0.5]);
        assert_eq!(halved.layers()[0].bias.as_ref().unwrap().data(), &[0.2]);
    }

    #[test]
    fn normalized_output_rescales_to_original() {
        let (model, xs) = mlp(3, 0.3);
        for strict in [false, true] {
            let (norm, scales) = normalize_activations(&model, &xs, 99.0, strict).unwrap();
            let product: f64 = scales.iter().product();
            for x in &xs {
                let a = model.forward(x, false).unwrap().0;
                let b = norm.forward(x, false).unwrap().0;
                for (a, b) in a.data().iter().zip(b.data()) {
                    assert!((b * product - a).abs() <= 1e-9 * a.abs().max(1.0));
                }
            }
            let report = normalization_report(&model, &norm, &xs, &scales, 99.0, 10).unwrap();
            assert!(report.max_residual() < 1e-9);
            assert_eq!(report.argmax_agreement, 1.0);
        }
    }

    #[test]
    fn strict_mode_hits_the_percentile_exactly() {
        let (model, xs) = mlp(5, 0.5);
        let (norm, _) = normalize_activations(&model, &xs, 98.0, true).unwrap();
        let report = normalization_report(&model, &norm, &xs, &norm.normalization.as_ref().unwrap().scales, 98.0, 0).unwrap();
        for l in &report.layers {
            assert_relative_eq!(l.normalized_percentile, 1.0, epsilon = 1e-9);
        }
        let (_, second) = normalize_activations(&norm, &xs, 98.0, true).unwrap();
        for s in second {
            assert_relative_eq!(s, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn legacy_matches_on_zero_bias_and_drifts_with_bias() {
        let (model, xs) = mlp(11, 0.0);
        let (legacy, lscales) = legacy_weight_norm(&model, &xs, 99.0).unwrap();
        let (norm, _) = normalize_activations(&model, &xs, 99.0, false).unwrap();
        let lambda: f64 = lscales.iter().product();
        for x in &xs {
            let a = model.forward(x, false).unwrap().0;
            let l = legacy.forward(x, false).unwrap().0;
            let n = norm.forward(x, false).unwrap().0;
            for ((a, l), n) in a.data().iter().zip(l.data()).zip(n.data()) {
                assert!((l * lambda - a).abs() < 1e-9);
                assert!((l - n).abs() < 1e-9);
            }
        }

        let (biased, xs) = mlp(11, 1.0);
        let (legacy, lscales) = legacy_weight_norm(&biased, &xs, 99.0).unwrap();
        let report = normalization_report(&biased, &legacy, &xs, &lscales, 99.0, 0).unwrap();
        assert!(report.layers[0].residual < 1e-9);
        assert!(report.max_residual() > 1e-3);
    }

    #[test]
    fn identity_report_has_zero_residual() {
        let (model, xs) = mlp(1, 0.2);
        let report = normalization_report(&model, &model, &xs, &[1.0, 1.0, 1.0], 100.0, 5).unwrap();
        assert_eq!(report.max_residual(), 0.0);
        assert_eq!(report.layers[0].pairs.len(), 5);
    }

    #[test]
    fn all_negative_layer_is_degenerate() {
        let w = Tensor::new(vec![1, 1], vec![-1.0]).unwrap();
        let model = AnnModel::new("neg", vec![1], vec![Layer::dense(w, Tensor::zeros(vec![1]), true).unwrap()]).unwrap();
        let err = normalize_activations(&model, &[Tensor::vector(vec![0.5]).unwrap()], 100.0, false).unwrap_err();
        assert!(matches!(err, QuartzError::DegenerateScale { layer: 0, .. }));
    }
}
