//! Small internal helpers: stable hashing and seed derivation.

/// FNV-1a over raw bytes. Stable across platforms and Rust versions, which
/// keeps hashed token buckets and derived RNG streams reproducible.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derives an independent RNG seed from a base seed, a stream tag, and salts.
pub fn derive_seed(base: u64, tag: &str, salts: &[u64]) -> u64 {
    let mut h = fnv1a64(tag.as_bytes()) ^ base.wrapping_mul(0x9e3779b97f4a7c15);
    for &s in salts {
        h ^= s.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
