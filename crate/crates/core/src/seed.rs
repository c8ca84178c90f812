//! Seed derivation. Every random stream descends from one master seed.

use sha2::{Digest, Sha256};

/// Seed for a named component: the first 8 bytes (little-endian) of
/// `SHA-256(component || master_le)`.
pub fn derive_seed(master: u64, component: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(component.as_bytes());
    h.update(master.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest length"))
}

/// Seed for the `index`-th item of a stream (splitmix64 finalizer).
pub fn sub_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Short hex digest of a float slice, for trajectory records.
pub fn digest_f64(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}
