//! Deterministic RNG substreams.
//!
//! Every random decision in a run draws from a stream keyed by
//! `(seed, generation, purpose, index)`, so results do not depend on the
//! order in which parallel workers pick up solutions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type UqdRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Selection = 2,
    Variation = 3,
    Extraction = 4,
    Evaluation = 5,
    Correction = 6,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn substream(seed: u64, generation: u64, stream: Stream, index: u64) -> UqdRng {
    let mut h = splitmix64(seed);
    for word in [generation, stream as u64, index] {
        h = splitmix64(h ^ word);
    }
    ChaCha8Rng::seed_from_u64(h)
}
