//! Counter-based derivation of sub-seeds from a single global seed.
//!
//! Every random component of an experiment draws its seed as
//! `derive(global, stream, counter)`, where `stream` is a fixed tag naming
//! the component (see [`Stream`]) and `counter` indexes replicates or
//! documents. The mixing function is SplitMix64 applied twice, so nearby
//! inputs give statistically unrelated outputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Named seed streams. The discriminant is part of the derivation and must
/// never be renumbered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Split = 2,
    Encoder = 3,
    PretrainHead = 4,
    FirstHead = 5,
    SecondHead = 6,
    RandHead = 7,
    Train = 8,
    Subsample = 9,
    SmoothGrad = 10,
    KernelShap = 11,
    Random = 12,
}

pub fn derive(global: u64, stream: Stream, counter: u64) -> u64 {
    splitmix64(splitmix64(global ^ (stream as u64).wrapping_mul(GOLDEN)).wrapping_add(counter))
}

/// Seed for a named parameter tensor, keyed by the owning seed.
pub fn for_name(seed: u64, name: &str) -> u64 {
    let mut h = splitmix64(seed);
    for b in name.bytes() {
        h = splitmix64(h ^ b as u64);
    }
    h
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
