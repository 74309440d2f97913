#![allow(dead_code)]

use quartz_core::model::{AnnModel, Layer};
use quartz_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn toy_model() -> AnnModel {
    let w = Tensor::new(vec![2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
    let b = Tensor::zeros(vec![2]);
    AnnModel::new("toy", vec![2], vec![Layer::dense(w, b, true).unwrap()]).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..=scale)).collect()
}

fn dense(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Layer {
    let scale = 1.5 / inputs as f64;
    let w = Tensor::new(vec![outputs, inputs], uniform(rng, outputs * inputs, scale)).unwrap();
    let b = Tensor::new(vec![outputs], uniform(rng, outputs, 0.2)).unwrap();
    Layer::dense(w, b, true).unwrap()
}

/// A random network of 1 to 4 parameter layers mixing dense, conv and
/// max-pool, widths at most 32, weights scaled so activations mostly stay
/// within `[0, 1]`.
pub fn random_model(rng: &mut ChaCha8Rng) -> AnnModel {
    let params = rng.gen_range(1..=4);
    let conv = params >= 2 && rng.gen_bool(0.5);
    let mut layers = Vec::new();
    let input_shape;
    let mut features;
    let mut remaining = params;
    if conv {
        let (c, h) = (rng.gen_range(1..=2), rng.gen_range(4..=6) * 2);
        input_shape = vec![c, h, h];
        let out_c = rng.gen_range(1..=3);
        let k = 3;
        let pad = rng.gen_range(0..=1);
        let scale = 1.5 / (c * k * k) as f64;
        let w = Tensor::new(vec![out_c, c, k, k], uniform(rng, out_c * c * k * k, scale)).unwrap();
        let b = Tensor::new(vec![out_c], uniform(rng, out_c, 0.2)).unwrap();
        layers.push(Layer::conv2d(w, b, 1, pad, true).unwrap());
        let mut side = h + 2 * pad - k + 1;
        if side % 2 == 0 && rng.gen_bool(0.7) {
            layers.push(Layer::max_pool(2, 2).unwrap());
            side /= 2;
        }
        layers.push(Layer::flatten());
        features = out_c * side * side;
        remaining -= 1;
    } else {
        features = rng.gen_range(1..=32);
        input_shape = vec![features];
    }
    for _ in 0..remaining {
        let out = rng.gen_range(1..=32);
        layers.push(dense(rng, features, out));
        features = out;
    }
    AnnModel::new("random", input_shape, layers).unwrap()
}

pub fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap()
}
