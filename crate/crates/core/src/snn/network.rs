use serde::{Deserialize, Serialize};

use super::fixed::{self, ONE};
use crate::error::{QuartzError, Result};
use crate::model::{AnnModel, Layer, LayerKind};

/// Options controlling how an ANN is turned into a spiking network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionOptions {
    /// Apply the rectifier to the output layer as well.
    pub rectify_last: bool,
    /// Evaluate the first parameter layer in floating point and latency-encode its outputs.
    pub first_layer_float: bool,
    /// Steps after `2 T_max` during which a non-rectified output unit may still
    /// fire (negative values down to `-ext / T_max`). `None` means `T_max`.
    pub negative_extension: Option<u32>,
}

impl Default for ConversionOptions {
    fn default() -> Self {
        ConversionOptions {
            rectify_last: true,
            first_layer_float: false,
            negative_extension: None,
        }
    }
}

/// Synapses into a stage, grouped by presynaptic unit (CSR layout).
#[derive(Debug, Clone, Default)]
pub(crate) struct Fanout {
    offsets: Vec<usize>,
    targets: Vec<u32>,
    weights: Vec<i64>,
}

impl Fanout {
    fn from_triples(pre_units: usize, mut triples: Vec<(u32, u32, i64)>) -> Self {
        triples.sort_unstable_by_key(|&(pre, post, _)| (pre, post));
        let mut offsets = vec![0usize; pre_units + 1];
        for &(pre, _, _) in &triples {
            offsets[pre as usize + 1] += 1;
        }
        for i in 0..pre_units {
            offsets[i + 1] += offsets[i];
        }
        Fanout {
            offsets,
            targets: triples.iter().map(|t| t.1).collect(),
            weights: triples.iter().map(|t| t.2).collect(),
        }
    }

    #[inline]
    pub(crate) fn of(&self, pre: usize) -> (&[u32], &[i64]) {
        let r = self.offsets[pre]..self.offsets[pre + 1];
        (&self.targets[r.clone()], &self.weights[r])
    }

    #[inline]
    pub(crate) fn len_of(&self, pre: usize) -> usize {
        self.offsets[pre + 1] - self.offsets[pre]
    }

    pub(crate) fn synapses(&self) -> usize {
        self.targets.len()
    }

    /// Number of incoming synapses per postsynaptic unit.
    pub(crate) fn fan_in(&self, post_units: usize) -> Vec<usize> {
        let mut counts = vec![0; post_units];
        for &t in &self.targets {
            counts[t as usize] += 1;
        }
        counts
    }
}

/// A layer of integrate-and-fire units with readout (counter) and rectifier synapses.
#[derive(Debug, Clone)]
pub struct SpikingLayer {
    /// The ANN layer with weights and bias snapped to the fixed-point grid.
    pub source: Layer,
    pub rectify: bool,
    pub bias: Vec<f64>,
    /// `1 - b - Σ w` per unit.
    pub counter_weight: Vec<f64>,
    /// Rectifier current, large enough to force a spike from any reachable state.
    pub beta: Vec<f64>,
    pub(crate) bias_fx: Vec<i64>,
    pub(crate) counter_fx: Vec<i64>,
    pub(crate) beta_fx: Vec<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolLayer {
    pub size: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub enum StageKind {
    Spiking(SpikingLayer),
    /// Earliest-spike pass-through; adds no window of its own.
    Pool(PoolLayer),
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub kind: StageKind,
    pub shape: Vec<usize>,
    /// 1-based window index of the spiking layer whose spikes this stage
    /// carries; 0 means the encoded input.
    pub window: usize,
    pub(crate) fanin: Fanout,
}

impl Stage {
    pub fn units(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_spiking(&self) -> bool {
        matches!(self.kind, StageKind::Spiking(_))
    }

    pub fn spiking(&self) -> Option<&SpikingLayer> {
        match &self.kind {
            StageKind::Spiking(l) => Some(l),
            StageKind::Pool(_) => None,
        }
    }

    /// Whether this stage's units are rectified (pools count as rectified:
    /// they only ever relay spikes of rectified units).
    pub fn rectified(&self) -> bool {
        match &self.kind {
            StageKind::Spiking(l) => l.rectify,
            StageKind::Pool(_) => true,
        }
    }

    /// Number of synapses from presynaptic unit `pre` into this stage.
    pub fn fanout_from(&self, pre: usize) -> usize {
        self.fanin.len_of(pre)
    }

    /// Incoming synapses per unit, excluding counter and rectifier synapses.
    pub fn fan_in(&self) -> Vec<usize> {
        self.fanin.fan_in(self.units())
    }

    pub fn synapse_count(&self) -> usize {
        self.fanin.synapses()
    }
}

/// Serializable description of a spiking network; the synapse tables are
/// rebuilt from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub t_max: u32,
    pub options: ConversionOptions,
    #[serde(default)]
    pub hop_delay: u32,
    pub input_shape: Vec<usize>,
    /// Layers evaluated in floating point before encoding.
    #[serde(default)]
    pub float_stage: Vec<Layer>,
    /// Spiking-side layers in order (parameter, pool and flatten layers).
    pub layers: Vec<Layer>,
}

/// A converted network ready for simulation. Immutable once built.
#[derive(Debug, Clone)]
pub struct SpikingNetwork {
    spec: NetworkSpec,
    encoded_shape: Vec<usize>,
    stages: Vec<Stage>,
}

/// Builds the spiking network for a (normalized) model.
pub fn convert(model: &AnnModel, t_max: u32, options: ConversionOptions) -> Result<SpikingNetwork> {
    if t_max == 0 {
        return Err(QuartzError::InvalidArgument("T_max must be at least 1".into()));
    }
    if !model.is_normalized() {
        log::warn!(
            "converting `{}` without activation normalization; expect early spikes",
            model.name
        );
    }
    let layers = model.layers();
    let params = model.parameter_layers();
    let last_param = *params.last().expect("validated model has a parameter layer");
    if layers[last_param + 1..]
        .iter()
        .any(|l| !matches!(l.kind, LayerKind::Flatten))
    {
        return Err(QuartzError::Unsupported(
            "the network must end with a parameter layer".into(),
        ));
    }
    for &i in &params[..params.len() - 1] {
        if !layers[i].rectify {
            return Err(QuartzError::Unsupported(format!(
                "hidden layer {i} is not rectified; only the output layer may skip the rectifier"
            )));
        }
    }

    let split = if options.first_layer_float {
        if params.len() < 2 {
            return Err(QuartzError::Unsupported(
                "first_layer_float needs at least two parameter layers".into(),
            ));
        }
        // The float stage takes the first parameter layer and any pooling
        // or flatten layers that directly follow it.
        let mut end = params[0] + 1;
        while end < layers.len() && !layers[end].is_parameter() {
            end += 1;
        }
        end
    } else {
        0
    };

    let mut spiking_layers: Vec<Layer> = layers[split..].to_vec();
    spiking_layers[last_param - split].rectify = options.rectify_last;

    SpikingNetwork::from_spec(NetworkSpec {
        name: model.name.clone(),
        t_max,
        options,
        hop_delay: 0,
        input_shape: model.input_shape().to_vec(),
        float_stage: layers[..split].to_vec(),
        layers: spiking_layers,
    })
}

impl SpikingNetwork {
    /// Builds synapse tables, counter weights and rectifier currents from a spec.
    pub fn from_spec(spec: NetworkSpec) -> Result<Self> {
        if spec.t_max == 0 {
            return Err(QuartzError::InvalidArgument("T_max must be at least 1".into()));
        }
        let mut shape = spec.input_shape.clone();
        let mut float_stage = Vec::with_capacity(spec.float_stage.len());
        for layer in &spec.float_stage {
            let layer = layer.clone().checked()?;
            shape = layer.output_shape(&shape)?;
            float_stage.push(layer);
        }
        let encoded_shape = shape.clone();

        let t = i64::from(spec.t_max);
        let mut stages: Vec<Stage> = Vec::new();
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut window = 0usize;
        for layer in &spec.layers {
            let layer = layer.clone().checked()?;
            let in_shape = shape.clone();
            let out_shape = layer.output_shape(&in_shape)?;
            match layer.kind {
                LayerKind::Flatten => {
                    if let Some(prev) = stages.last_mut() {
                        prev.shape = out_shape.clone();
                    }
                }
                LayerKind::MaxPool2d { size, stride } => {
                    let fanin = pool_fanout(&in_shape, &out_shape, size, stride);
                    stages.push(Stage {
                        kind: StageKind::Pool(PoolLayer { size, stride }),
                        shape: out_shape.clone(),
                        window,
                        fanin,
                    });
                }
                LayerKind::Dense | LayerKind::Conv2d { .. } => {
                    window += 1;
                    let snapped = snap_layer(&layer)?;
                    let triples = synapses(&snapped, &in_shape, &out_shape)?;
                    let units: usize = out_shape.iter().product();
                    let pre_units: usize = in_shape.iter().product();

                    let bias = bias_per_unit(&snapped, &out_shape);
                    let bias_fx = bias.iter().map(|&b| fixed::to_fixed(b)).collect::<Result<Vec<_>>>()?;
                    let mut sum_fx = vec![0i64; units];
                    let mut abs_fx = vec![0i64; units];
                    let mut sum_f = vec![0f64; units];
                    for &(_, post, w) in &triples {
                        sum_fx[post as usize] += w;
                        abs_fx[post as usize] += w.abs();
                        sum_f[post as usize] += fixed::to_f64(w);
                    }
                    let counter_fx: Vec<i64> = (0..units).map(|u| ONE - bias_fx[u] - sum_fx[u]).collect();
                    let counter_weight: Vec<f64> = (0..units).map(|u| 1.0 - bias[u] - sum_f[u]).collect();
                    let mut beta_fx = Vec::with_capacity(units);
                    for u in 0..units {
                        let depression = (abs_fx[u] as i128 + bias_fx[u].abs() as i128) * t as i128;
                        let beta = t as i128 * ONE as i128 + depression + ONE as i128;
                        // Headroom for u, which stays within ±(beta + T·ONE) plus early pre-charge.
                        if beta > (i64::MAX / 8) as i128 {
                            return Err(QuartzError::Unsupported(format!(
                                "weights of layer {} overflow the fixed-point membrane at T_max = {}",
                                window, spec.t_max
                            )));
                        }
                        beta_fx.push(beta as i64);
                    }
                    let beta = beta_fx.iter().map(|&b| fixed::to_f64(b)).collect();
                    stages.push(Stage {
                        kind: StageKind::Spiking(SpikingLayer {
                            rectify: snapped.rectify,
                            source: snapped,
                            bias,
                            counter_weight,
                            beta,
                            bias_fx,
                            counter_fx,
                            beta_fx,
                        }),
                        shape: out_shape.clone(),
                        window,
                        fanin: Fanout::from_triples(pre_units, triples),
                    });
                }
            }
            layers.push(layer);
            shape = out_shape;
        }
        let Some(last) = stages.last() else {
            return Err(QuartzError::Unsupported("no spiking layers after conversion".into()));
        };
        if !last.is_spiking() {
            return Err(QuartzError::Unsupported(
                "the network must end with a parameter layer".into(),
            ));
        }
        for s in &stages[..stages.len() - 1] {
            if let Some(l) = s.spiking() {
                if !l.rectify {
                    return Err(QuartzError::Unsupported(
                        "only the output layer may skip the rectifier".into(),
                    ));
                }
            }
        }

        let mut spec = spec;
        spec.float_stage = float_stage;
        spec.layers = stages_to_layers(&layers, &stages);
        Ok(SpikingNetwork {
            spec,
            encoded_shape,
            stages,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn t_max(&self) -> u32 {
        self.spec.t_max
    }

    pub fn options(&self) -> ConversionOptions {
        self.spec.options
    }

    /// Steps of negative-value extension for a non-rectified output layer.
    pub fn negative_extension(&self) -> u32 {
        self.spec.options.negative_extension.unwrap_or(self.spec.t_max)
    }

    /// Transmission delay (in steps) per hop between spiking layers.
    pub fn hop_delay(&self) -> u32 {
        self.spec.hop_delay
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    /// Shape of the latency-encoded input (after any float stage).
    pub fn encoded_shape(&self) -> &[usize] {
        &self.encoded_shape
    }

    pub fn encoded_units(&self) -> usize {
        self.encoded_shape.iter().product()
    }

    pub fn float_stage(&self) -> &[Layer] {
        &self.spec.float_stage
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Number of spiking windows (parameter layers simulated as spiking).
    pub fn spiking_layers(&self) -> usize {
        self.stages.iter().filter(|s| s.is_spiking()).count()
    }

    /// Total units across all stages (spiking and pooling), excluding inputs.
    pub fn unit_count(&self) -> usize {
        self.stages.iter().map(Stage::units).sum()
    }

    /// Global step at which local time 0 of window `k` falls. Window 0 is
    /// the encoded input, whose spikes carry value `(T - s) / T`; placing its
    /// origin at `-T` lets every window decode as `2 - local / T`.
    pub fn window_offset(&self, window: usize) -> i64 {
        let t = i64::from(self.spec.t_max);
        let d = i64::from(self.spec.hop_delay);
        if window == 0 {
            -t
        } else {
            (window as i64 - 1) * t + window as i64 * d
        }
    }

    /// Last local step a stage's units may fire at.
    pub fn window_end(&self, stage: usize) -> i64 {
        let t = i64::from(self.spec.t_max);
        if self.stages[stage].rectified() {
            2 * t
        } else {
            2 * t + i64::from(self.negative_extension())
        }
    }

    /// Global step after which nothing can happen.
    pub fn final_step(&self) -> u64 {
        (0..self.stages.len())
            .filter(|&i| self.stages[i].is_spiking())
            .map(|i| self.window_offset(self.stages[i].window) + self.window_end(i))
            .max()
            .unwrap_or(0) as u64
    }

    /// Synapses a unit of `stage` (or of the encoded input when `stage` is
    /// `None`) sends to the next stage.
    pub fn fanout(&self, stage: Option<usize>, unit: usize) -> usize {
        let next = stage.map_or(0, |s| s + 1);
        self.stages.get(next).map_or(0, |s| s.fanout_from(unit))
    }

    /// Returns a copy whose spiking layers use `f` to produce new weights;
    /// counter weights and rectifier currents are recomputed.
    pub fn map_weights(&self, mut f: impl FnMut(&Layer) -> Layer) -> Result<SpikingNetwork> {
        let mut spec = self.spec.clone();
        for layer in spec.layers.iter_mut().filter(|l| l.is_parameter()) {
            *layer = f(layer);
        }
        SpikingNetwork::from_spec(spec)
    }

    /// The network's layers as a floating-point model, float stage
    /// included. The output layer's rectify flag follows the conversion
    /// options.
    pub fn to_model(&self) -> Result<AnnModel> {
        let layers = self.spec.float_stage.iter().chain(&self.spec.layers).cloned().collect();
        AnnModel::new(self.spec.name.clone(), self.spec.input_shape.clone(), layers)
    }

    pub fn with_hop_delay(&self, d: u32) -> SpikingNetwork {
        let mut net = self.clone();
        net.spec.hop_delay = d;
        net
    }
}

fn stages_to_layers(layers: &[Layer], stages: &[Stage]) -> Vec<Layer> {
    let mut spiking = stages.iter().filter_map(Stage::spiking);
    layers
        .iter()
        .map(|l| {
            if l.is_parameter() {
                spiking.next().expect("one stage per parameter layer").source.clone()
            } else {
                l.clone()
            }
        })
        .collect()
}

fn snap_layer(layer: &Layer) -> Result<Layer> {
    let mut out = layer.clone();
    for t in out.weights.iter_mut().chain(out.bias.iter_mut()) {
        for v in t.data_mut() {
            *v = fixed::snap(*v)?;
        }
    }
    Ok(out)
}

fn bias_per_unit(layer: &Layer, out_shape: &[usize]) -> Vec<f64> {
    let b = layer.bias_ref().data();
    match layer.kind {
        LayerKind::Conv2d { .. } => {
            let per_channel = out_shape[1] * out_shape[2];
            b.iter().flat_map(|&v| std::iter::repeat(v).take(per_channel)).collect()
        }
        _ => b.to_vec(),
    }
}

/// (pre, post, weight) for every real synapse of a parameter layer. Padding
/// taps have no presynaptic unit and produce no synapse.
fn synapses(layer: &Layer, in_shape: &[usize], out_shape: &[usize]) -> Result<Vec<(u32, u32, i64)>> {
    let w = layer.weights_ref();
    let ws = w.data();
    let mut out = Vec::new();
    match layer.kind {
        LayerKind::Dense => {
            let (n_out, n_in) = (w.shape()[0], w.shape()[1]);
            out.reserve(n_out * n_in);
            for o in 0..n_out {
                for i in 0..n_in {
                    out.push((i as u32, o as u32, fixed::to_fixed(ws[o * n_in + i])?));
                }
            }
        }
        LayerKind::Conv2d { stride, padding } => {
            let (oc_n, ic_n, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
            let (h, wd) = (in_shape[1], in_shape[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            for oc in 0..oc_n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let post = ((oc * oh + oy) * ow + ox) as u32;
                        for ic in 0..ic_n {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let pre = ((ic * h + iy as usize) * wd + ix as usize) as u32;
                                    let wv = ws[((oc * ic_n + ic) * kh + ky) * kw + kx];
                                    out.push((pre, post, fixed::to_fixed(wv)?));
                                }
                            }
                        }
                    }
                }
            }
        }
        _ => unreachable!("synapses of a non-parameter layer"),
    }
    Ok(out)
}

fn pool_fanout(in_shape: &[usize], out_shape: &[usize], size: usize, stride: usize) -> Fanout {
    let (c_n, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut triples = Vec::with_capacity(c_n * oh * ow * size * size);
    for c in 0..c_n {
        for oy in 0..oh {
            for ox in 0..ow {
                let post = ((c * oh + oy) * ow + ox) as u32;
                for ky in 0..size {
                    for kx in 0..size {
                        let pre = ((c * h + oy * stride + ky) * w + ox * stride + kx) as u32;
                        triples.push((pre, post, 0));
                    }
                }
            }
        }
    }
    Fanout::from_triples(c_n * h * w, triples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn dense_model(w: Vec<f64>, b: Vec<f64>, n_out: usize, n_in: usize) -> AnnModel {
        let layer = Layer::dense(
            Tensor::new(vec![n_out, n_in], w).unwrap(),
            Tensor::vector(b).unwrap(),
            true,
        )
        .unwrap();
        AnnModel::new("m", vec![n_in], vec![layer]).unwrap()
    }

    fn counters(net: &SpikingNetwork) -> Vec<f64> {
        net.stages()[0].spiking().unwrap().counter_weight.clone()
    }

    #[test]
    fn toy_network_counter_weights() {
        let net = convert(
            &dense_model(vec![1.0, -1.0, -1.0, 1.0], vec![0.0, 0.0], 2, 2),
            16,
            ConversionOptions::default(),
        )
        .unwrap();
        assert_eq!(counters(&net), vec![1.0, 1.0]);
    }

    #[test]
    fn identity_counter_weight_is_zero() {
        let net = convert(
            &dense_model(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2),
            4,
            ConversionOptions::default(),
        )
        .unwrap();
        assert_eq!(counters(&net), vec![0.0, 0.0]);
    }

    #[test]
    fn counter_weight_includes_bias() {
        let net = convert(&dense_model(vec![0.25, 0.25], vec![0.5], 1, 2), 4, ConversionOptions::default()).unwrap();
        assert_eq!(counters(&net), vec![0.0]);
        let l = net.stages()[0].spiking().unwrap();
        assert_eq!(l.counter_fx, vec![0]);
    }

    #[test]
    fn window_offsets_follow_hops() {
        let net = convert(
            &dense_model(vec![1.0], vec![0.0], 1, 1),
            16,
            ConversionOptions::default(),
        )
        .unwrap();
        assert_eq!(net.window_offset(0), -16);
        assert_eq!(net.window_offset(1), 0);
        assert_eq!(net.window_offset(3), 32);
        let delayed = net.with_hop_delay(2);
        assert_eq!(delayed.window_offset(1), 2);
        assert_eq!(delayed.window_offset(3), 38);
    }

    #[test]
    fn conv_padding_taps_have_no_synapse() {
        let conv = Layer::conv2d(
            Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap(),
            Tensor::zeros(vec![1]),
            1,
            1,
            true,
        )
        .unwrap();
        let model = AnnModel::new("c", vec![1, 2, 2], vec![conv]).unwrap();
        let net = convert(&model, 4, ConversionOptions::default()).unwrap();
        let stage = &net.stages()[0];
        assert_eq!(stage.fan_in(), vec![4, 4, 4, 4]);
        // Counter weight balances only the real synapses.
        assert_eq!(stage.spiking().unwrap().counter_weight, vec![-3.0; 4]);
    }

    #[test]
    fn rejects_unrectified_hidden_layer() {
        let l1 = Layer::dense(Tensor::zeros(vec![2, 2]), Tensor::zeros(vec![2]), false).unwrap();
        let l2 = Layer::dense(Tensor::zeros(vec![2, 2]), Tensor::zeros(vec![2]), false).unwrap();
        let model = AnnModel::new("m", vec![2], vec![l1, l2]).unwrap();
        assert!(matches!(
            convert(&model, 4, ConversionOptions::default()),
            Err(QuartzError::Unsupported(_))
        ));
    }
}
