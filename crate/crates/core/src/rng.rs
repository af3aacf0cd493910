//! Keyed random substreams.
//!
//! Every stochastic decision in a run draws from its own ChaCha8 stream keyed
//! by `(seed, purpose, a, b)`, so results do not depend on evaluation order or
//! on how many workers trained clients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for substreams. Values are part of the reproducibility
/// contract; do not renumber.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Dataset = 1,
    Partition = 2,
    Init = 3,
    Selection = 4,
    Shuffle = 5,
    Dropout = 6,
    Noise = 7,
    Split = 8,
    Repeat = 9,
    Bench = 10,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit key from a seed and up to three coordinates.
pub fn derive_seed(seed: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed ^ 0x5851_F42D_4C95_7F2D);
    h = splitmix64(h ^ stream as u64);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(17))
}

pub fn substream(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, a, b))
}
