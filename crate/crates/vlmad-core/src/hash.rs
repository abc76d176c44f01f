//! Stable 64-bit FNV-1a hashing.
//!
//! Used wherever a value must be a fixed, process-independent function of
//! its inputs: the mock teacher, the hash text encoders, and per-index
//! seed splitting.

pub const FNV_OFFSET: u64 = 0xcbf29ce484222325;
pub const FNV_PRIME: u64 = 0x100000001b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    fnv1a_with(FNV_OFFSET, bytes)
}

pub fn fnv1a_with(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Map a hash to [-1, 1].
pub fn to_unit_interval(h: u64) -> f64 {
    (h as f64 / u64::MAX as f64) * 2.0 - 1.0
}

/// Derive a child seed for index `i`; deterministic regardless of the order
/// in which indices are visited.
pub fn split_seed(seed: u64, i: u64) -> u64 {
    let mut h = fnv1a_with(FNV_OFFSET ^ seed, &i.to_le_bytes());
    // one extra avalanche round so consecutive indices diverge
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51afd7ed558ccd);
    h ^= h >> 33;
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable() {
        assert_eq!(fnv1a(b""), FNV_OFFSET);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"hello"), fnv1a(b"hello"));
        assert_ne!(fnv1a(b"hello"), fnv1a(b"hellp"));
    }

    #[test]
    fn split_seed_diverges() {
        let a = split_seed(42, 0);
        let b = split_seed(42, 1);
        let c = split_seed(43, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
