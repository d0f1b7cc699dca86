//! Named, independent random substreams derived from one top-level seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Randomness consumers. Each gets its own ChaCha stream so that changing how
/// much one component draws never perturbs another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Dropout = 3,
    Split = 4,
    Shuffle = 5,
    Clustering = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Derive a child seed for a component from the top-level seed (splitmix64).
pub fn derive_seed(seed: u64, stream: Stream) -> u64 {
    let mut z = seed ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
