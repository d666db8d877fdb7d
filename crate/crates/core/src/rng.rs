//! Keyed deterministic randomness.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is a
//! 64-bit FNV-1a hash over `(global seed, key parts...)`. Keys name the record
//! and the operation, so adding an operation never shifts another one's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Incremental 64-bit FNV-1a.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(FNV_OFFSET)
    }
}

impl Fnv1a {
    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::default();
    h.write(bytes);
    h.finish()
}

/// Hash of the global seed (little-endian bytes) followed by each key part.
/// A 0xff separator follows every part so `("ab","c")` and `("a","bc")` differ.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Fnv1a::default();
    h.write(&seed.to_le_bytes());
    for part in parts {
        h.write(part.as_bytes());
        h.write(&[0xff]);
    }
    h.finish()
}

pub fn keyed_rng(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}
