use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Real, Tensor};

/// Seeded parameter initialiser.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal with standard deviation `1/sqrt(fan_in)`.
    pub fn scaled_normal<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(&mut self.rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    pub fn uniform<T: Real>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(self.rng.random_range(-bound..bound)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }
}
