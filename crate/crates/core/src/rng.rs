//! Named random streams split from a master seed.
//!
//! Every role in a run (training, initial noise, pin noise, inner perturbation
//! noise, reconstruction noise, observation noise) draws from its own ChaCha8
//! stream. The stream id packs the role label in the high 32 bits and the seed
//! index in the low 32 bits, so streams are counter-addressed and independent
//! of the order in which they are created.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Training,
    InitNoise,
    Pin,
    Inner,
    Recon,
    Observation,
    Oracle,
    Data,
}

impl Stream {
    fn label(self) -> u64 {
        match self {
            Stream::Training => 1,
            Stream::InitNoise => 2,
            Stream::Pin => 3,
            Stream::Inner => 4,
            Stream::Recon => 5,
            Stream::Observation => 6,
            Stream::Oracle => 7,
            Stream::Data => 8,
        }
    }
}

/// Derives the generator for `(master, role, seed_index)`.
pub fn stream(master: u64, role: Stream, seed_index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream((role.label() << 32) | seed_index as u64);
    rng
}

/// The full set of streams one sampling chain (or batch of chains) consumes.
#[derive(Debug, Clone)]
pub struct SamplerStreams {
    pub init: ChaCha8Rng,
    pub pin: ChaCha8Rng,
    pub inner: ChaCha8Rng,
    pub recon: ChaCha8Rng,
}

impl SamplerStreams {
    pub fn new(master: u64, seed_index: u32) -> Self {
        Self {
            init: stream(master, Stream::InitNoise, seed_index),
            pin: stream(master, Stream::Pin, seed_index),
            inner: stream(master, Stream::Inner, seed_index),
            recon: stream(master, Stream::Recon, seed_index),
        }
    }
}

#[inline]
pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn fill_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for x in out {
        *x = rng.sample(StandardNormal);
    }
}
