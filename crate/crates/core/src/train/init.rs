//! Glorot-uniform weight initialization.

use rand::Rng;

use crate::tensor::Tensor;

/// Half-width of the Glorot-uniform interval: `√(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// A `fan_in × fan_out` matrix with entries uniform in `±glorot_bound`.
pub fn glorot_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    assert!(fan_in > 0 && fan_out > 0, "fans must be positive");
    let bound = glorot_bound(fan_in, fan_out);
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape")
}
