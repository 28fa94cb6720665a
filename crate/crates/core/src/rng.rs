//! Seeded randomness.
//!
//! Every stochastic step draws from a ChaCha8 stream (counter-based, 64-bit
//! seed). Per-sample streams are keyed by [`sub_seed`], so sample `i` of a
//! dataset is the same no matter how many samples precede it or which
//! thread generates it. Gaussian variates use the Box-Muller transform.
//! Streams are reproducible on one platform; cross-language bit equality
//! is not a goal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The generator type used throughout the crate.
pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the seed of stream `index` from a master seed.
pub fn sub_seed(master: u64, index: u64) -> u64 {
    mix64(mix64(master.wrapping_add(0x9e37_79b9_7f4a_7c15)) ^ index.wrapping_mul(0xd134_2543_de82_ef95))
}

/// Generator seeded directly from `seed`.
pub fn seeded(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

/// Generator for stream `index` under `master`.
pub fn stream(master: u64, index: u64) -> StreamRng {
    seeded(sub_seed(master, index))
}

/// Box-Muller standard normal source over a [`StreamRng`].
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: StreamRng,
    spare: Option<f64>,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self::from_rng(seeded(seed))
    }

    pub fn from_rng(rng: StreamRng) -> Self {
        Self { rng, spare: None }
    }

    /// One N(0, 1) variate. Variates are produced in pairs; the second of
    /// each pair is returned by the next call.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the logarithm finite.
        let u1 = 1.0 - self.rng.random::<f64>();
        let u2 = self.rng.random::<f64>();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// N(0, sigma^2) variate.
    pub fn normal(&mut self, sigma: f64) -> f64 {
        sigma * self.standard_normal()
    }

    pub fn rng_mut(&mut self) -> &mut StreamRng {
        &mut self.rng
    }
}
