//! Small mini-batch SGD trainer (softmax cross-entropy) for dense and
//! LeNet-style conv models.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{QuartzError, Result};
use crate::model::{AnnModel, Layer, LayerKind};
use crate::tensor::Tensor;

/// Samples whose gradients are summed sequentially before the (ordered)
/// reduction; fixed so results do not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// `784-128-10` style dense stack, or `lenet`.
    pub architecture: String,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            architecture: "784-128-10".into(),
            epochs: 10,
            learning_rate: 0.1,
            batch_size: 32,
            seed: 42,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.batch_size == 0 {
            return Err(QuartzError::InvalidArgument(format!(
                "learning rate and batch size must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub test_accuracy: Option<f64>,
}

fn he(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn dense(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize, rectify: bool) -> Result<Layer> {
    let w = Tensor::new(vec![outputs, inputs], he(rng, outputs * inputs, inputs))?;
    Layer::dense(w, Tensor::zeros(vec![outputs]), rectify)
}

fn conv(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize, k: usize) -> Result<Layer> {
    let w = Tensor::new(vec![outputs, inputs, k, k], he(rng, outputs * inputs * k * k, inputs * k * k))?;
    Layer::conv2d(w, Tensor::zeros(vec![outputs]), 1, 0, true)
}

/// Builds a freshly initialized model for an architecture string: dash
/// separated widths of a dense stack (`784-128-10`), or `lenet` (two 5x5
/// conv + 2x2 pool stages with 6 and 12 channels, then 192-64-10) for
/// 28x28 single-channel images.
pub fn build_model(architecture: &str, seed: u64) -> Result<AnnModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if architecture == "lenet" {
        let layers = vec![
            conv(&mut rng, 1, 6, 5)?,
            Layer::max_pool(2, 2)?,
            conv(&mut rng, 6, 12, 5)?,
            Layer::max_pool(2, 2)?,
            Layer::flatten(),
            dense(&mut rng, 192, 64, true)?,
            dense(&mut rng, 64, 10, false)?,
        ];
        return AnnModel::new("lenet", vec![1, 28, 28], layers);
    }
    let widths: Vec<usize> = architecture
        .split('-')
        .map(|w| w.trim().parse::<usize>().ok().filter(|&w| w > 0))
        .collect::<Option<_>>()
        .ok_or_else(|| QuartzError::InvalidArgument(format!("unknown architecture {architecture:?}")))?;
    if widths.len() < 2 {
        return Err(QuartzError::InvalidArgument(format!(
            "architecture {architecture:?} needs at least an input and an output width"
        )));
    }
    let last = widths.len() - 2;
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| dense(&mut rng, w[0], w[1], i != last))
        .collect::<Result<Vec<_>>>()?;
    AnnModel::new(architecture, vec![widths[0]], layers)
}

struct Grads {
    w: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl Grads {
    fn zeros(model: &AnnModel) -> Self {
        let len = |t: &Option<Tensor>| t.as_ref().map_or(0, Tensor::len);
        Grads {
            w: model.layers().iter().map(|l| vec![0.0; len(&l.weights)]).collect(),
            b: model.layers().iter().map(|l| vec![0.0; len(&l.bias)]).collect(),
        }
    }

    fn add(&mut self, other: &Grads) {
        for (a, b) in self.w.iter_mut().zip(&other.w).chain(self.b.iter_mut().zip(&other.b)) {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        }
    }
}

fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exp.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Accumulates the gradient of one sample into `grads`; returns its loss.
fn backprop(model: &AnnModel, x: &Tensor, label: usize, grads: &mut Grads) -> Result<f64> {
    let outs = model.forward_all(x)?;
    let (loss, mut g) = softmax_xent(outs.last().unwrap().data(), label);
    for (i, layer) in model.layers().iter().enumerate().rev() {
        let input = if i == 0 { x } else { &outs[i - 1] };
        let out = &outs[i];
        if layer.rectify && layer.is_parameter() {
            g.iter_mut().zip(out.data()).for_each(|(g, &y)| {
                if y <= 0.0 {
                    *g = 0.0
                }
            });
        }
        let need_dx = i > 0;
        g = match layer.kind {
            LayerKind::Dense => dense_back(layer, input, &g, &mut grads.w[i], &mut grads.b[i], need_dx),
            LayerKind::Conv2d { stride, padding } => conv_back(
                layer, input, out.shape(), stride, padding, &g, &mut grads.w[i], &mut grads.b[i], need_dx,
            ),
            LayerKind::MaxPool2d { size, stride } => pool_back(input, out, size, stride, &g),
            LayerKind::Flatten => g,
        };
    }
    Ok(loss)
}

fn dense_back(layer: &Layer, x: &Tensor, g: &[f64], gw: &mut [f64], gb: &mut [f64], need_dx: bool) -> Vec<f64> {
    let w = layer.weights.as_ref().unwrap();
    let n_in = w.shape()[1];
    let xs = x.data();
    let mut dx = vec![0.0; if need_dx { n_in } else { 0 }];
    for (o, &go) in g.iter().enumerate() {
        if go == 0.0 {
            continue;
        }
        gb[o] += go;
        let row = &mut gw[o * n_in..(o + 1) * n_in];
        row.iter_mut().zip(xs).for_each(|(gw, x)| *gw += go * x);
        if need_dx {
            let wrow = &w.data()[o * n_in..(o + 1) * n_in];
            dx.iter_mut().zip(wrow).for_each(|(dx, w)| *dx += go * w);
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn conv_back(
    layer: &Layer,
    x: &Tensor,
    out_shape: &[usize],
    stride: usize,
    padding: usize,
    g: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    need_dx: bool,
) -> Vec<f64> {
    let w = layer.weights.as_ref().unwrap();
    let (oc_n, ic_n, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let (xs, ws) = (x.data(), w.data());
    let mut dx = vec![0.0; if need_dx { xs.len() } else { 0 }];
    for oc in 0..oc_n {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = g[(oc * oh + oy) * ow + ox];
                if go == 0.0 {
                    continue;
                }
                gb[oc] += go;
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
                            let wi = ((oc * ic_n + ic) * kh + ky) * kw + kx;
                            let xi = (ic * h + iy as usize) * wd + ix as usize;
                            gw[wi] += go * xs[xi];
                            if need_dx {
                                dx[xi] += go * ws[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn pool_back(x: &Tensor, out: &Tensor, size: usize, stride: usize, g: &[f64]) -> Vec<f64> {
    let (c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (out.shape()[1], out.shape()[2]);
    let xs = x.data();
    let mut dx = vec![0.0; xs.len()];
    for c in 0..c_n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (c * oh + oy) * ow + ox;
                let mut best = (f64::NEG_INFINITY, 0);
                for ky in 0..size {
                    for kx in 0..size {
                        let i = (c * h + oy * stride + ky) * w + ox * stride + kx;
                        if xs[i] > best.0 {
                            best = (xs[i], i);
                        }
                    }
                }
                dx[best.1] += g[o];
            }
        }
    }
    dx
}

fn sgd_step(model: &mut AnnModel, grads: &Grads, step: f64) {
    for (i, layer) in model.layers_mut().iter_mut().enumerate() {
        if let (Some(w), Some(b)) = (layer.weights.as_mut(), layer.bias.as_mut()) {
            w.data_mut().iter_mut().zip(&grads.w[i]).for_each(|(w, g)| *w -= step * g);
            b.data_mut().iter_mut().zip(&grads.b[i]).for_each(|(b, g)| *b -= step * g);
        }
    }
}

/// Trains a model from scratch. With `test` given, the test accuracy is
/// recorded after every epoch.
pub fn train_model(
    config: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<(AnnModel, Vec<EpochStats>)> {
    config.validate()?;
    let mut model = build_model(&config.architecture, config.seed)?;
    let shape = model.input_shape().to_vec();
    let inputs = train.tensors(&shape)?;
    let test_inputs = test.map(|t| t.tensors(&shape)).transpose()?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let partial: Vec<(Grads, f64)> = batch
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let mut g = Grads::zeros(&model);
                    let mut loss = 0.0;
                    for &i in chunk {
                        loss += backprop(&model, &inputs[i], train.labels[i], &mut g)?;
                    }
                    Ok((g, loss))
                })
                .collect::<Result<_>>()?;
            let mut grads = Grads::zeros(&model);
            for (g, loss) in &partial {
                grads.add(g);
                total_loss += loss;
            }
            sgd_step(&mut model, &grads, config.learning_rate / batch.len() as f64);
        }
        let loss = total_loss / train.len().max(1) as f64;
        if !loss.is_finite() {
            return Err(QuartzError::Divergence {
                epoch,
                loss,
                config: format!("{config:?}"),
            });
        }
        let test_accuracy = match (&test_inputs, test) {
            (Some(xs), Some(t)) => Some(evaluate(&model, xs, &t.labels)?),
            _ => None,
        };
        log::info!("epoch {epoch}: loss {loss:.4} test accuracy {test_accuracy:?}");
        history.push(EpochStats {
            epoch,
            loss,
            test_accuracy,
        });
    }
    Ok((model, history))
}

/// Fraction of samples whose argmax output equals the label.
pub fn evaluate(model: &AnnModel, inputs: &[Tensor], labels: &[usize]) -> Result<f64> {
    if inputs.len() != labels.len() {
        return Err(QuartzError::Shape(format!(
            "{} inputs but {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let correct = inputs
        .par_iter()
        .zip(labels)
        .map(|(x, &l)| model.predict(x).map(|p| usize::from(p == l)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / inputs.len().max(1) as f64)
}

/// Forward pass of a whole batch, in parallel.
pub fn forward_batch(model: &AnnModel, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    inputs.par_iter().map(|x| Ok(model.forward(x, false)?.0)).collect()
}
