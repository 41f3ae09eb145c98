//! Hash primitives shared by the mock backend, fallback ranking and the store.

use sha2::{Digest, Sha256};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Unit separator placed between variable-length hash key fields.
pub const FIELD_SEPARATOR: u8 = 0x1f;

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_extend(FNV_OFFSET, bytes)
}

/// Continues an FNV-1a state with more bytes.
pub fn fnv1a64_extend(mut state: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        state ^= u64::from(b);
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}

/// Seeded key hash used by the mock backend and by deterministic fallbacks.
///
/// Bytes hashed, in order: `seed` as 8 little-endian bytes, then every part
/// as UTF-8 with a single `0x1f` byte *before* each part.
pub fn seeded_hash(seed: u64, parts: &[&str]) -> u64 {
    let mut state = fnv1a64_extend(FNV_OFFSET, &seed.to_le_bytes());
    for part in parts {
        state = fnv1a64_extend(state, &[FIELD_SEPARATOR]);
        state = fnv1a64_extend(state, part.as_bytes());
    }
    state
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        // Published FNV-1a 64-bit test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn seeded_hash_layout() {
        let mut bytes = 7u64.to_le_bytes().to_vec();
        bytes.push(0x1f);
        bytes.extend_from_slice(b"p1");
        bytes.push(0x1f);
        bytes.extend_from_slice(b"2");
        assert_eq!(seeded_hash(7, &["p1", "2"]), fnv1a64(&bytes));
    }

    #[test]
    fn sha256_of_empty() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
