//! Counter-based random streams keyed by `(seed, stream_id)`.
//!
//! Every stochastic draw in the library comes from a stream whose id is
//! derived from what the draw is for (sample index, timestep, purpose), so
//! results do not depend on evaluation order or batch composition.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What a stream is used for; mixed into the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    PoissonSample = 1,
    GaussianSample = 2,
    RateNoise = 3,
    Shuffle = 4,
    Init = 5,
    Patches = 6,
    Probe = 7,
    Oracle = 8,
}

/// SplitMix64 finaliser.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a stream id from a sample index, a timestep and a purpose tag.
pub fn stream_id(sample: u64, step: u64, purpose: Purpose) -> u64 {
    mix64(mix64(mix64(sample) ^ step.rotate_left(21)) ^ (purpose as u64).rotate_left(47))
}

/// Derives a child seed, e.g. per epoch.
pub fn child_seed(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(tag.wrapping_add(0x51_7CC1_B727_220A)))
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn for_step(seed: u64, sample: u64, step: u64, purpose: Purpose) -> Self {
        Self::new(seed, stream_id(sample, step, purpose))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn open01(&mut self) -> f64 {
        loop {
            let v = (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            if v > 0.0 {
                return v;
            }
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
