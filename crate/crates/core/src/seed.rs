//! Named seed derivation from a single master seed.

use sha2::{Digest, Sha256};

/// First eight bytes of `sha256(master_le || name)` as a little-endian `u64`.
pub fn derive(master: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_name_sensitive() {
        assert_eq!(derive(42, "search"), derive(42, "search"));
        assert_ne!(derive(42, "search"), derive(42, "trials"));
        assert_ne!(derive(42, "search"), derive(43, "search"));
    }
}
