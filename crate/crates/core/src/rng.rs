//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit `&mut StreamRng`. A run has one
//! master seed; independent consumers draw from distinct ChaCha streams of
//! that seed, so adding draws in one consumer never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Fixed stream ids fanned out from a master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Split = 1,
    Init = 2,
    Warmup = 3,
    EStep = 4,
    MStep = 5,
    Queue = 6,
    Predict = 7,
    Partition = 8,
    Synth = 9,
    Sample = 10,
}

/// Stream `stream` of master seed `seed`.
pub fn stream(seed: u64, stream: Stream) -> StreamRng {
    indexed_stream(seed, stream as u64)
}

/// Stream with an arbitrary id, for consumers that need a family of streams
/// (e.g. one per prediction sample).
pub fn indexed_stream(seed: u64, id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Id of the `k`-th sub-stream under `base`.
pub fn sub_stream_id(base: Stream, k: u64) -> u64 {
    ((base as u64) << 32) | (k & 0xFFFF_FFFF)
}
