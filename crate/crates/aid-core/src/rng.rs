//! Seeded, stream-stable randomness. Every stochastic choice in the crate
//! flows through a `ChaCha8Rng` so runs are reproducible bit for bit.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent substream seed from a base seed and a tag.
/// SplitMix64 finalizer; cheap and well distributed.
pub fn derive(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform draw in [0, 1).
pub fn uniform_f64(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen::<f64>()
}

/// Standard normal via Box-Muller; consumes exactly two uniforms per draw.
pub fn normal_f64(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = 1.0 - rng.gen::<f64>(); // in (0, 1], keeps ln finite
    let u2 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn normal_vec<S: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<S> {
    (0..n).map(|_| S::from_f64(normal_f64(rng))).collect()
}
