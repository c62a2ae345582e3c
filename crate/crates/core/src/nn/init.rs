use rand_distr::{Distribution, Normal};

use super::tensor::Scalar;
use crate::rng::Rng;

/// Standard deviation of He initialization for the given fan-in.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Zero-mean normal draws with standard deviation `sqrt(2 / fan_in)`, where
/// `fan_in` is the product of all but the last entry of `dims`.
pub fn he_init<T: Scalar>(dims: &[usize], rng: &mut Rng) -> Vec<T> {
    let n: usize = dims.iter().product();
    let fan_in: usize = dims[..dims.len().saturating_sub(1)].iter().product::<usize>().max(1);
    let normal = Normal::new(0.0, he_std(fan_in)).expect("finite std");
    (0..n).map(|_| T::lit(normal.sample(rng))).collect()
}
