use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256StarStar;

use super::Tensor;
use crate::error::{Error, Result};

/// Seeded generator: xoshiro256** with its state expanded from the 64-bit
/// seed by SplitMix64. Identical seeds give bit-identical draw sequences.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256StarStar,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    /// Independent child stream; `salt` distinguishes siblings.
    pub fn fork(&mut self, salt: u64) -> Rng {
        let base: u64 = self.inner.random();
        Rng::new(base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

/// Gaussian tensor of the given shape and standard deviation.
pub fn randn_init(rng: &mut Rng, shape: &[usize], stddev: f64) -> Result<Tensor> {
    if !(stddev > 0.0) || !stddev.is_finite() {
        return Err(Error::invalid("stddev", format!("must be > 0, got {stddev}")));
    }
    let numel: usize = shape.iter().product();
    if shape.is_empty() || numel == 0 {
        return Err(Error::invalid("shape", format!("zero-size shape {shape:?}")));
    }
    let data = (0..numel).map(|_| rng.normal() * stddev).collect();
    Tensor::new(shape.to_vec(), data)
}
