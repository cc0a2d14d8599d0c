//! Seed derivation. Every random step draws from a ChaCha8 stream whose
//! 256-bit key is expanded from a 64-bit seed with splitmix64; per-step
//! seeds mix the step name into the project seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    let mut sm = SplitMix64::new(seed);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&sm.next_u64().to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// FNV-1a, used only to fold labels into seeds.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn derive_seed(base: u64, label: &str) -> u64 {
    SplitMix64::new(base ^ fnv1a64(label.as_bytes())).next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn splitmix_reference_values() {
        // Reference outputs of splitmix64 seeded with 0.
        let mut sm = SplitMix64::new(0);
        assert_eq!(sm.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(sm.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn derived_streams_are_reproducible_and_distinct() {
        let a = seeded_rng(derive_seed(7, "triage")).next_u64();
        let b = seeded_rng(derive_seed(7, "triage")).next_u64();
        let c = seeded_rng(derive_seed(7, "low_fas")).next_u64();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
