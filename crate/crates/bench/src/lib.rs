//! Fixtures shared by the benchmarks.

use quartz_core::normalize::normalize_activations;
use quartz_core::train::build_model;
use quartz_core::{AnnModel, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Inputs in `[0, 1]` with roughly MNIST-like sparsity.
pub fn random_inputs(shape: &[usize], n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    (0..n)
        .map(|_| {
            let data = (0..len)
                .map(|_| if rng.gen_bool(0.2) { rng.gen_range(0.0..=1.0) } else { 0.0 })
                .collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches")
        })
        .collect()
}

/// An untrained but normalized model of the given architecture.
pub fn normalized_model(architecture: &str) -> AnnModel {
    let model = build_model(architecture, 7).expect("valid architecture");
    let calibration = random_inputs(model.input_shape(), 64, 1);
    normalize_activations(&model, &calibration, 99.9, false)
        .expect("calibration activations are positive")
        .0
}
