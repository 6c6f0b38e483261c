//! Named random substreams derived from a single top-level seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Substream names used across the crate.
pub mod stream {
    pub const DATA: &str = "data";
    pub const INIT: &str = "init";
    pub const TRAINING: &str = "training";
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent generator for `(seed, name)`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}
