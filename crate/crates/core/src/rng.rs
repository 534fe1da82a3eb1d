//! Seed plumbing. Every stream in a run is derived from one 64-bit seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from `base`, a stream label and an index.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let mut h = mix(base);
    for b in label.bytes() {
        h = mix(h ^ b as u64);
    }
    mix(h ^ index.wrapping_mul(0xA24B_AED4_963E_E407))
}

pub fn derived(base: u64, label: &str, index: u64) -> SimRng {
    seeded(derive_seed(base, label, index))
}
