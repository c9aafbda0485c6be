//! Seeded random streams.
//!
//! A stream is a ChaCha8 generator keyed by the 64-bit seed and selected by a
//! 64-bit stream id. Named purposes map to stream ids through 64-bit FNV-1a;
//! per-path and per-purpose children are derived with a SplitMix64 mix, so
//! every sub-task is reproducible on its own. Normal variates use the
//! ziggurat sampler of `rand_distr::StandardNormal`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngSpec {
    pub seed: u64,
    pub stream: u64,
}

/// 64-bit FNV-1a of the UTF-8 bytes.
pub fn stream_id(purpose: &str) -> u64 {
    purpose.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

impl RngSpec {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn for_purpose(seed: u64, purpose: &str) -> Self {
        Self::new(seed, stream_id(purpose))
    }

    /// Independent child spec for a named sub-task.
    pub fn child(&self, purpose: &str) -> Self {
        Self::new(self.seed, mix(self.stream, stream_id(purpose)))
    }

    /// Child spec for the `index`-th path of a batch.
    pub fn path_spec(&self, index: u64) -> Self {
        Self::new(self.seed, mix(self.stream, index))
    }

    pub fn rng(&self) -> StreamRng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream);
        r
    }

    pub fn path(&self, index: u64) -> StreamRng {
        self.path_spec(index).rng()
    }
}

#[inline]
pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn fill_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = rng.sample(StandardNormal);
    }
}
