//! Named random streams split from one master seed.
//!
//! Each concern draws from its own ChaCha stream so that enabling or
//! disabling one feature never shifts the randomness seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Proposals = 2,
    Features = 3,
    LabeledSampling = 4,
    UnlabeledSampling = 5,
    LabeledAug = 6,
    UnlabeledAug = 7,
    Views = 8,
    Teacher = 9,
    Eval = 10,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Per-item stream, independent of the order items are processed in.
pub fn item_rng(seed: u64, stream: Stream, item: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(item.wrapping_add(1))));
    rng.set_stream(stream as u64);
    rng
}

/// Derived seed for an auxiliary dataset (e.g. the held-out evaluation split).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}
