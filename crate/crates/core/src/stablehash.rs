//! Stable 64-bit hashing (FNV-1a) for reproducible manifests and keys.
//!
//! `std::hash` makes no cross-release stability promise, so manifests and
//! lexicon headers use this fixed implementation instead.

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x00000100000001b3;

/// Incremental FNV-1a hasher seeded with an explicit value.
#[derive(Debug, Clone)]
pub struct StableHasher {
    state: u64,
}

impl StableHasher {
    pub fn new(seed: u64) -> Self {
        let mut h = StableHasher { state: FNV_OFFSET };
        h.write_u64(seed);
        h
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.state ^= u64::from(b);
            self.state = self.state.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    pub fn write_i64(&mut self, v: i64) {
        self.write(&v.to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.state
    }
}

/// Hash a byte slice with the given seed in one call.
pub fn hash_bytes(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = StableHasher::new(seed);
    h.write(bytes);
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_across_calls() {
        assert_eq!(hash_bytes(7, b"abc"), hash_bytes(7, b"abc"));
        assert_ne!(hash_bytes(7, b"abc"), hash_bytes(8, b"abc"));
        assert_ne!(hash_bytes(7, b"abc"), hash_bytes(7, b"abd"));
    }

    #[test]
    fn empty_input_still_mixes_seed() {
        assert_ne!(hash_bytes(1, b""), hash_bytes(2, b""));
    }
}
