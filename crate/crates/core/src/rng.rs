//! Counter-style deterministic random streams.
//!
//! Every stream is a ChaCha8 generator keyed by `(seed, domain, index)`.
//! Per-sample draws use the sample id as the index, so a sample's
//! perturbation depends only on the run seed and its id, never on iteration
//! order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Separates the purposes that draw from the same user seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    ClassMeans = 1,
    MixtureSamples = 2,
    LabelNoiseSelect = 3,
    LabelNoiseValue = 4,
    FeatureNoise = 5,
    Split = 6,
    KMeans = 7,
    Init = 8,
    Shuffle = 9,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut state = seed ^ (domain as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
