use rand::Rng;

use crate::tensor::Tensor;

/// Zero-mean normal initialization with `std = sqrt(2 / fan_in)`.
pub fn he_normal<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}
