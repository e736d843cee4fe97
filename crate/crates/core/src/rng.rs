//! Deterministic random-stream derivation.
//!
//! Every source of randomness in a run (environment layouts, roster draws,
//! action sampling, minibatch shuffles, evaluation rollouts, parameter init)
//! gets its own ChaCha stream derived from the master seed, a string tag and
//! an index. Streams are independent of each other and of execution order,
//! which is what makes runs resumable and bit-reproducible: re-deriving the
//! stream for episode `k` never requires replaying episodes `0..k`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a 64-bit value through the SplitMix64 finalizer.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// FNV-1a hash of a tag string, used to separate named streams.
fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in tag.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a child seed from `(master, tag, index)`.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mixed = splitmix64(master)
        ^ splitmix64(fnv1a(tag))
        ^ splitmix64(index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    splitmix64(mixed)
}

/// A ChaCha8 generator for the stream `(master, tag, index)`.
pub fn stream(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, index))
}

/// A ChaCha8 generator for a stream indexed by two counters, e.g.
/// (evaluation roster count, rollout number).
pub fn stream2(master: u64, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    stream(master, tag, a.wrapping_mul(0x1_0000_0001).wrapping_add(b))
}
