//! Seeded parameter initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

/// Uniform fan-in scaled initialization, `U(-sqrt(1/fan_in), sqrt(1/fan_in))`.
pub fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, shape: &[usize]) -> Tensor {
    let limit = (1.0 / fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// A standard normal draw via Box-Muller.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
