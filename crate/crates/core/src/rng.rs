//! Seeded random streams. Every consumer derives its own stream from the run
//! seed plus a purpose label and an index, so call order never changes draws.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::hashing::fnv1a64;

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, purpose: &str, index: u64) -> StreamRng {
    let mut key = fnv1a64(seed, purpose.as_bytes());
    key = fnv1a64(key, &index.to_le_bytes());
    ChaCha8Rng::seed_from_u64(key)
}

pub fn gaussian(rng: &mut StreamRng, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches element count")
}

pub fn gaussian_scaled(rng: &mut StreamRng, shape: &[usize], std: f64) -> ArrayD<f64> {
    gaussian(rng, shape).mapv(|v| v * std)
}

pub fn uniform_index(rng: &mut StreamRng, upper: usize) -> usize {
    rng.random_range(0..upper)
}

/// Evaluation seeding rule: `42 + prompt_idx * 10 + video_idx`.
pub fn prompt_seed(prompt_idx: u64, video_idx: u64) -> u64 {
    seed_rule(42, prompt_idx, video_idx)
}

/// The same rule with a configurable base.
pub fn seed_rule(base: u64, prompt_idx: u64, video_idx: u64) -> u64 {
    base.wrapping_add(prompt_idx.wrapping_mul(10)).wrapping_add(video_idx)
}
