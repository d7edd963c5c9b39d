//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

/// Uniform in `±sqrt(6 / (fan_in + fan_out))` for an `fan_in × fan_out` matrix.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, std: f64, shape: &[usize]) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite standard deviation");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}
