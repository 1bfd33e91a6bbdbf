//! Seeded random streams.
//!
//! Every consumer draws from a ChaCha8 stream keyed by `(seed, stream)` and
//! positioned by a block counter, so a given `(seed, stream, counter)` triple
//! always yields the same numbers regardless of what other streams consumed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream used by [`crate::models::synth_blobs`].
pub const STREAM_DATA: u64 = 1;
/// Stream used for parameter initialization.
pub const STREAM_INIT: u64 = 2;
/// Stream used for epoch shuffling; the counter is the epoch index.
pub const STREAM_SHUFFLE: u64 = 3;
/// Stream used by randomized checks (adjoint tests, probes).
pub const STREAM_CHECK: u64 = 4;

pub fn stream(seed: u64, stream: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    // 2^32 words per counter step keeps distinct counters from overlapping.
    rng.set_word_pos(u128::from(counter) << 32);
    rng
}
