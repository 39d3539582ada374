//! Seeded randomness.
//!
//! The generator is ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded through
//! `seed_from_u64`; normal draws use `rand_distr::StandardNormal`. Both are
//! portable, so a seed names the same stream on every platform.

use rand::seq::index;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for sub-task `index` of a run seeded with `seed`.
    ///
    /// The two words are mixed with SplitMix64 so neighbouring indices give
    /// unrelated seeds.
    pub fn derive(seed: u64, index: u64) -> Self {
        Self::new(splitmix64(splitmix64(seed) ^ index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// `amount` distinct indices from `0..len`, uniformly without replacement.
    pub fn choose_indices(&mut self, len: usize, amount: usize) -> Vec<usize> {
        index::sample(&mut self.inner, len, amount).into_vec()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Standard-normal tensor of the given shape.
pub fn seeded_normal(rng: &mut Rng, shape: &[usize]) -> Result<Tensor> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Shape(format!(
            "cannot sample zero-size shape {shape:?}"
        )));
    }
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normal_vec(n))
}
