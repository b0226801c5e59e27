//! Named random substreams derived from a single run seed.
//!
//! Every consumer of randomness (world generation, rollouts, batching,
//! shuffled evaluation, parameter init) draws from its own stream so that
//! components stay reproducible independently of each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 64-bit seed for `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: &str, index: u64) -> u64 {
    // FNV-1a over the stream name
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(splitmix64(seed ^ h).wrapping_add(splitmix64(index)))
}

pub fn stream_rng(seed: u64, stream: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, stream, index))
}
