//! Seeded random streams.
//!
//! Every random quantity is drawn from a ChaCha stream identified by a
//! `(seed, stream)` pair, so independent consumers never share state and
//! per-sample streams stay stable under batching.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensorgrad::Tensor;

pub type StreamRng = ChaCha8Rng;

/// Stream tags; keep them distinct.
pub mod tags {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const DATA: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const MASK: u64 = 5;
    pub const METRIC: u64 = 6;
    /// Sampler streams are `SAMPLE_BASE + sample index`.
    pub const SAMPLE_BASE: u64 = 1 << 32;
}

pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| normal(rng))
}

/// Fisher–Yates permutation of `0..n`.
pub fn permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
