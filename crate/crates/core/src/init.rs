//! Seeded parameter initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub use rand::SeedableRng;

pub type Rng64 = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `U(-k, k)` with `k = fan_in^(-1/2)`.
pub fn fan_in_uniform<T: Scalar>(shape: Shape, fan_in: usize, rng: &mut Rng64) -> Tensor<T> {
    let k = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::narrow(rng.gen_range(-k..k)))
}

/// `U(lo, hi)`, mostly for test inputs.
pub fn uniform<T: Scalar>(shape: Shape, lo: f64, hi: f64, rng: &mut Rng64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::narrow(rng.gen_range(lo..hi)))
}
