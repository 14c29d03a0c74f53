//! Shared fixtures for the criterion benchmarks.

use stalesgd_core::tensor::draw_gaussian;
use stalesgd_core::{Activation, Matrix, MiniBatch, ModelSpec, RngStream, Weights};

/// A model of the given widths with tanh hidden layers and seeded weights.
pub fn model(sizes: &[usize], seed: u64) -> Weights {
    let spec = ModelSpec::uniform(sizes.to_vec(), Activation::Tanh).expect("valid sizes");
    Weights::init(&spec, &mut RngStream::new(seed, 1))
}

/// A Gaussian mini-batch matching `w`'s input width and class count.
pub fn batch(w: &Weights, mu: usize, seed: u64) -> MiniBatch {
    let mut rng = RngStream::new(seed, 7);
    let d = w.spec().input_size();
    let x = Matrix::from_vec(mu, d, draw_gaussian(&mut rng, mu * d, 0.0, 1.0)).expect("shape");
    let y = (0..mu).map(|_| rng.index(w.spec().classes())).collect();
    MiniBatch::new(x, y).expect("labels match rows")
}

/// `k` gradient-sized vectors of standard normals.
pub fn vectors(k: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = RngStream::new(seed, 8);
    (0..k).map(|_| draw_gaussian(&mut rng, len, 0.0, 1.0)).collect()
}
