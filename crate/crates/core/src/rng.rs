//! Seeded random streams.
//!
//! Every consumer of randomness receives an explicit generator; nothing in
//! the crate reads a global RNG.

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// splitmix64 finalizer, used to derive independent sub-stream seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for sub-stream `stream` of a run seeded with `seed`.
pub fn derive(seed: u64, stream: u64) -> u64 {
    mix(seed ^ mix(stream.wrapping_add(0x5354_4152)))
}

pub fn normal(rng: &mut Rng) -> f32 {
    rng.sample::<f32, _>(StandardNormal)
}

pub fn normal_vec(rng: &mut Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n).map(|_| normal(rng) * std).collect()
}

/// Uniform in [0, 1).
pub fn uniform(rng: &mut Rng) -> f32 {
    rng.random::<f32>()
}

pub fn uniform_f64(rng: &mut Rng) -> f64 {
    rng.random::<f64>()
}

pub fn below(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}
