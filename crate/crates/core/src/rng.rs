//! Seeded random sources. Every random draw in the crate goes through here so
//! that runs are reproducible from their seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::Tensor;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a stream tag.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn uniform_tensor(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}
