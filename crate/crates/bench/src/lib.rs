//! Shared input builders for the pipeline benchmarks.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use adaptsign_core::Tensor;

/// Uniform random tensor in `[0, 1)` with a fixed seed per shape.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel = shape.iter().product();
    Tensor::from_vec(shape, (0..numel).map(|_| rng.gen_range(0.0..1.0)).collect())
}

/// A random `[steps, classes]` log-probability lattice (normalized rows).
pub fn random_lattice(steps: usize, classes: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(steps * classes);
    for _ in 0..steps {
        let logits: Vec<f32> = (0..classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let z: f32 = logits.iter().map(|l| (l - max).exp()).sum();
        data.extend(logits.iter().map(|l| l - max - z.ln()));
    }
    Tensor::from_vec(&[steps, classes], data)
}
