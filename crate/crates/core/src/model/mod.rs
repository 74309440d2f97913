//! ANN data model: layers, the floating-point reference forward pass, MAC
//! counting and the on-disk model directory format.

mod forward;
mod io;

pub use forward::{apply_layer, count_ann_macs};
pub use io::{load_model, save_model, BlobDtype};

use serde::{Deserialize, Serialize};

use crate::error::{QuartzError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv2d { stride: usize, padding: usize },
    MaxPool2d { size: usize, stride: usize },
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::MaxPool2d { .. } => "max_pool2d",
            LayerKind::Flatten => "flatten",
        }
    }
}

/// One layer of a feed-forward network.
///
/// Dense weights are `[out, in]`, Conv2d weights `[out_ch, in_ch, kh, kw]`;
/// bias is `[out]` / `[out_ch]`. Pooling and flatten layers carry no tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    pub weights: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub rectify: bool,
}

impl Layer {
    pub fn dense(weights: Tensor, bias: Tensor, rectify: bool) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(QuartzError::Shape(format!(
                "dense weights must be [out, in], got {:?}",
                weights.shape()
            )));
        }
        if bias.shape() != [weights.shape()[0]] {
            return Err(QuartzError::Shape(format!(
                "dense bias {:?} does not match weights {:?}",
                bias.shape(),
                weights.shape()
            )));
        }
        Ok(Layer {
            kind: LayerKind::Dense,
            weights: Some(weights),
            bias: Some(bias),
            rectify,
        })
    }

    pub fn conv2d(
        weights: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
        rectify: bool,
    ) -> Result<Self> {
        if weights.shape().len() != 4 {
            return Err(QuartzError::Shape(format!(
                "conv2d weights must be [out_ch, in_ch, kh, kw], got {:?}",
                weights.shape()
            )));
        }
        if bias.shape() != [weights.shape()[0]] {
            return Err(QuartzError::Shape(format!(
                "conv2d bias {:?} does not match weights {:?}",
                bias.shape(),
                weights.shape()
            )));
        }
        if stride == 0 {
            return Err(QuartzError::InvalidArgument("conv2d stride must be positive".into()));
        }
        Ok(Layer {
            kind: LayerKind::Conv2d { stride, padding },
            weights: Some(weights),
            bias: Some(bias),
            rectify,
        })
    }

    pub fn max_pool(size: usize, stride: usize) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(QuartzError::InvalidArgument(
                "max-pool size and stride must be positive".into(),
            ));
        }
        Ok(Layer {
            kind: LayerKind::MaxPool2d { size, stride },
            weights: None,
            bias: None,
            rectify: false,
        })
    }

    pub fn flatten() -> Self {
        Layer {
            kind: LayerKind::Flatten,
            weights: None,
            bias: None,
            rectify: false,
        }
    }

    /// Re-runs the constructor checks, e.g. after deserialization.
    pub fn checked(self) -> Result<Self> {
        match self.kind {
            LayerKind::Dense | LayerKind::Conv2d { .. } => {
                let (Some(w), Some(b)) = (self.weights, self.bias) else {
                    return Err(QuartzError::Shape(format!(
                        "{} layer without weights or bias",
                        self.kind.name()
                    )));
                };
                let w = Tensor::new(w.shape().to_vec(), w.into_data())?;
                let b = Tensor::new(b.shape().to_vec(), b.into_data())?;
                match self.kind {
                    LayerKind::Conv2d { stride, padding } => {
                        Layer::conv2d(w, b, stride, padding, self.rectify)
                    }
                    _ => Layer::dense(w, b, self.rectify),
                }
            }
            LayerKind::MaxPool2d { size, stride } => Layer::max_pool(size, stride),
            LayerKind::Flatten => Ok(Layer::flatten()),
        }
    }

    /// Dense and Conv2d layers carry parameters.
    pub fn is_parameter(&self) -> bool {
        matches!(self.kind, LayerKind::Dense | LayerKind::Conv2d { .. })
    }

    pub(crate) fn weights_ref(&self) -> &Tensor {
        self.weights.as_ref().expect("parameter layer without weights")
    }

    pub(crate) fn bias_ref(&self) -> &Tensor {
        self.bias.as_ref().expect("parameter layer without bias")
    }

    /// Output shape for a given input shape, or a shape error.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self.kind {
            LayerKind::Dense => {
                let w = self.weights_ref().shape();
                if input != [w[1]] {
                    return Err(QuartzError::Shape(format!(
                        "dense layer expects input [{}], got {input:?}",
                        w[1]
                    )));
                }
                Ok(vec![w[0]])
            }
            LayerKind::Conv2d { stride, padding } => {
                let w = self.weights_ref().shape();
                let [c, h, wd] = chw(input, "conv2d")?;
                if c != w[1] {
                    return Err(QuartzError::Shape(format!(
                        "conv2d expects {} input channels, got {c}",
                        w[1]
                    )));
                }
                let oh = window_count(h, w[2], stride, padding, "conv2d")?;
                let ow = window_count(wd, w[3], stride, padding, "conv2d")?;
                Ok(vec![w[0], oh, ow])
            }
            LayerKind::MaxPool2d { size, stride } => {
                let [c, h, w] = chw(input, "max_pool2d")?;
                let oh = window_count(h, size, stride, 0, "max_pool2d")?;
                let ow = window_count(w, size, stride, 0, "max_pool2d")?;
                Ok(vec![c, oh, ow])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

fn chw(input: &[usize], what: &str) -> Result<[usize; 3]> {
    match input {
        &[c, h, w] => Ok([c, h, w]),
        _ => Err(QuartzError::Shape(format!(
            "{what} expects a [channels, height, width] input, got {input:?}"
        ))),
    }
}

/// Number of window positions along one axis; only exact tilings are legal.
fn window_count(len: usize, kernel: usize, stride: usize, padding: usize, what: &str) -> Result<usize> {
    let padded = len + 2 * padding;
    if kernel > padded || !(padded - kernel).is_multiple_of(stride) {
        return Err(QuartzError::Shape(format!(
            "{what}: kernel {kernel}, stride {stride}, padding {padding} do not tile an axis of length {len}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// How a model's parameters were rescaled, if at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationState {
    pub percentile: f64,
    pub scales: Vec<f64>,
    #[serde(default = "default_method")]
    pub method: String,
}

fn default_method() -> String {
    "activation".to_string()
}

/// An ordered feed-forward stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnModel {
    pub name: String,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    pub normalization: Option<NormalizationState>,
}

impl AnnModel {
    /// Validates that the layer shapes chain from `input_shape` and that
    /// at least one parameter layer exists.
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let model = AnnModel {
            name: name.into(),
            input_shape,
            layers,
            normalization: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(QuartzError::Shape(format!(
                "invalid input shape {:?}",
                self.input_shape
            )));
        }
        if !self.layers.iter().any(Layer::is_parameter) {
            return Err(QuartzError::InvalidArgument(
                "model needs at least one parameter layer".into(),
            ));
        }
        self.layer_shapes().map(|_| ())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Output shape of every layer, in order.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| QuartzError::Shape(format!("layer {i}: {e}")))?;
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.layer_shapes()
            .expect("validated model")
            .pop()
            .expect("non-empty model")
    }

    /// Indices of the Dense/Conv2d layers.
    pub fn parameter_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_parameter())
            .collect()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalization.is_some()
    }

    /// Forward pass. When `record_activations` is set, returns the output of
    /// every parameter and pooling layer (after rectification).
    pub fn forward(&self, input: &Tensor, record_activations: bool) -> Result<(Tensor, Option<Vec<Tensor>>)> {
        self.check_input(input)?;
        let mut x = input.clone();
        let mut recorded = record_activations.then(Vec::new);
        for layer in &self.layers {
            x = apply_layer(layer, &x)?;
            if let Some(rec) = recorded.as_mut() {
                if !matches!(layer.kind, LayerKind::Flatten) {
                    rec.push(x.clone());
                }
            }
        }
        Ok((x, recorded))
    }

    /// Output of every layer (including flatten), in order.
    pub fn forward_all(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(input)?;
        let mut outs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let next = apply_layer(layer, outs.last().unwrap_or(input))?;
            outs.push(next);
        }
        Ok(outs)
    }

    pub fn predict(&self, input: &Tensor) -> Result<usize> {
        Ok(self.forward(input, false)?.0.argmax())
    }

    pub(crate) fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(QuartzError::Shape(format!(
                "model expects input {:?}, got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(out: usize, inp: usize, w: Vec<f64>, b: Vec<f64>, rectify: bool) -> Layer {
        Layer::dense(
            Tensor::new(vec![out, inp], w).unwrap(),
            Tensor::vector(b).unwrap(),
            rectify,
        )
        .unwrap()
    }

    #[test]
    fn rectified_dense_matches_toy_network() {
        let model = AnnModel::new(
            "toy",
            vec![2],
            vec![dense(2, 2, vec![1.0, -1.0, -1.0, 1.0], vec![0.0, 0.0], true)],
        )
        .unwrap();
        let x = Tensor::vector(vec![0.75, 0.25]).unwrap();
        let (y, _) = model.forward(&x, false).unwrap();
        assert_eq!(y.data(), &[0.5, 0.0]);
    }

    #[test]
    fn identity_dense_is_identity() {
        let model = AnnModel::new(
            "id",
            vec![3],
            vec![dense(
                3,
                3,
                vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
                vec![0.0; 3],
                false,
            )],
        )
        .unwrap();
        let x = Tensor::vector(vec![0.1, -2.5, 7.0]).unwrap();
        assert_eq!(model.forward(&x, false).unwrap().0, x);
    }

    #[test]
    fn max_pool_takes_window_max() {
        let pool = Layer::max_pool(2, 2).unwrap();
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = apply_layer(&pool, &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn rejects_non_tiling_conv() {
        let w = Tensor::zeros(vec![1, 1, 3, 3]);
        let conv = Layer::conv2d(w, Tensor::zeros(vec![1]), 2, 0, true).unwrap();
        assert!(conv.output_shape(&[1, 6, 6]).is_err());
        assert_eq!(conv.output_shape(&[1, 7, 7]).unwrap(), vec![1, 3, 3]);
    }

    #[test]
    fn rejects_broken_chain() {
        let err = AnnModel::new(
            "bad",
            vec![3],
            vec![dense(2, 2, vec![0.0; 4], vec![0.0; 2], true)],
        );
        assert!(matches!(err, Err(QuartzError::Shape(_))));
    }

    #[test]
    fn requires_a_parameter_layer() {
        assert!(AnnModel::new("none", vec![4], vec![Layer::flatten()]).is_err());
    }
}
