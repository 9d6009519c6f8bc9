//! Deterministic stream derivation.
//!
//! Every random quantity in the crate draws from a `ChaCha12` generator whose
//! 256-bit key is expanded from `(master_seed, domain_tag)` by SplitMix64 and
//! whose 64-bit ChaCha stream number is the replicate (or block, or batch)
//! index. Distinct `(domain, index)` pairs therefore use disjoint counter
//! ranges of the same keyed cipher: streams cannot overlap by construction.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Purpose tag mixed into the stream key, so that e.g. field coefficients and
/// bootstrap resampling never share a stream even at equal indices.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum StreamDomain {
    FieldCoefficients = 1,
    BlockCoefficients = 2,
    QuProposals = 3,
    QuResample = 4,
    Bootstrap = 5,
    MonteCarlo = 6,
    Replicate = 7,
    GridNoise = 8,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Generator for `(master, domain, index)`.
pub fn stream(master: u64, domain: StreamDomain, index: u64) -> ChaCha12Rng {
    let mut state = master ^ (domain as u64).wrapping_mul(0xA24BAED4963EE407);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha12Rng::from_seed(seed);
    rng.set_stream(index);
    rng
}

/// Derived sub-seed, for recording per-cell seeds in manifests.
pub fn derive_seed(master: u64, domain: StreamDomain, index: u64) -> u64 {
    let mut state = master ^ (domain as u64).wrapping_mul(0xA24BAED4963EE407) ^ index;
    splitmix64(&mut state)
}
