use super::{AnnModel, Layer, LayerKind};
use crate::error::Result;
use crate::tensor::Tensor;

/// Applies one layer, including rectification when the layer asks for it.
pub fn apply_layer(layer: &Layer, x: &Tensor) -> Result<Tensor> {
    let mut y = linear(layer, x)?;
    if layer.rectify && layer.is_parameter() {
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    }
    Ok(y)
}

/// Layer output before rectification.
pub(crate) fn linear(layer: &Layer, x: &Tensor) -> Result<Tensor> {
    let out_shape = layer.output_shape(x.shape())?;
    let out = match layer.kind {
        LayerKind::Dense => dense(layer, x),
        LayerKind::Conv2d { stride, padding } => conv2d(layer, x, &out_shape, stride, padding),
        LayerKind::MaxPool2d { size, stride } => max_pool(x, &out_shape, size, stride),
        LayerKind::Flatten => x.data().to_vec(),
    };
    Ok(Tensor::from_parts_unchecked(out_shape, out))
}

fn dense(layer: &Layer, x: &Tensor) -> Vec<f64> {
    let w = layer.weights_ref();
    let inputs = w.shape()[1];
    let xs = x.data();
    w.data()
        .chunks_exact(inputs)
        .zip(layer.bias_ref().data())
        .map(|(row, &b)| b + row.iter().zip(xs).map(|(w, x)| w * x).sum::<f64>())
        .collect()
}

fn conv2d(layer: &Layer, x: &Tensor, out_shape: &[usize], stride: usize, padding: usize) -> Vec<f64> {
    let w = layer.weights_ref();
    let (oc_n, ic_n, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let (xs, ws) = (x.data(), w.data());
    let bias = layer.bias_ref().data();
    let mut out = vec![0.0; oc_n * oh * ow];
    for oc in 0..oc_n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[oc];
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
                            acc += ws[((oc * ic_n + ic) * kh + ky) * kw + kx]
                                * xs[(ic * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

fn max_pool(x: &Tensor, out_shape: &[usize], size: usize, stride: usize) -> Vec<f64> {
    let (c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let xs = x.data();
    let mut out = Vec::with_capacity(c_n * oh * ow);
    for c in 0..c_n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..size {
                    for kx in 0..size {
                        m = m.max(xs[(c * h + oy * stride + ky) * w + ox * stride + kx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Multiply-accumulate count of one inference: output elements times
/// kernel inputs for every parameter layer. Padding taps are counted, as
/// MAC counters for dense frameworks do.
pub fn count_ann_macs(model: &AnnModel) -> u64 {
    let shapes = model.layer_shapes().expect("validated model");
    model
        .layers()
        .iter()
        .zip(&shapes)
        .map(|(layer, out)| match layer.kind {
            LayerKind::Dense => {
                let w = layer.weights_ref().shape();
                (w[0] * w[1]) as u64
            }
            LayerKind::Conv2d { .. } => {
                let w = layer.weights_ref().shape();
                let positions = (out[1] * out[2]) as u64;
                positions * (w[0] * w[1] * w[2] * w[3]) as u64
            }
            _ => 0,
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_layer(out: usize, inp: usize) -> Layer {
        Layer::dense(
            Tensor::zeros(vec![out, inp]),
            Tensor::zeros(vec![out]),
            true,
        )
        .unwrap()
    }

    #[test]
    fn macs_of_single_dense() {
        let m = AnnModel::new("d", vec![784], vec![dense_layer(10, 784)]).unwrap();
        assert_eq!(count_ann_macs(&m), 7_840);
    }

    #[test]
    fn macs_of_small_conv() {
        let conv = Layer::conv2d(Tensor::zeros(vec![1, 1, 3, 3]), Tensor::zeros(vec![1]), 1, 0, true).unwrap();
        let m = AnnModel::new("c", vec![1, 4, 4], vec![conv]).unwrap();
        assert_eq!(count_ann_macs(&m), 36);
    }

    #[test]
    fn macs_of_mlp_and_additivity() {
        let a = AnnModel::new("a", vec![784], vec![dense_layer(128, 784)]).unwrap();
        let b = AnnModel::new("b", vec![128], vec![dense_layer(10, 128)]).unwrap();
        let ab = AnnModel::new("ab", vec![784], vec![dense_layer(128, 784), dense_layer(10, 128)]).unwrap();
        assert_eq!(count_ann_macs(&ab), 101_632);
        assert_eq!(count_ann_macs(&ab), count_ann_macs(&a) + count_ann_macs(&b));
    }

    #[test]
    fn conv_matches_hand_computed_values() {
        // 1x3x3 input, 1 output channel, 2x2 kernel of ones, stride 1, pad 0.
        let conv = Layer::conv2d(
            Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap(),
            Tensor::vector(vec![0.5]).unwrap(),
            1,
            0,
            false,
        )
        .unwrap();
        let x = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let y = apply_layer(&conv, &x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[12.5, 16.5, 24.5, 28.5]);
    }

    #[test]
    fn padded_conv_sees_zero_border() {
        let conv = Layer::conv2d(
            Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap(),
            Tensor::zeros(vec![1]),
            1,
            1,
            false,
        )
        .unwrap();
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = apply_layer(&conv, &x).unwrap();
        assert_eq!(y.data(), &[10.0; 4]);
    }
}
