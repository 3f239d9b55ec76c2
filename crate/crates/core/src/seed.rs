//! Named sub-seeds and content fingerprints.

use sha2::{Digest, Sha256};

/// Derives a stage seed from the root seed and a stage name, so any stage can
/// be re-run in isolation and still see the same random stream.
pub fn sub_seed(root: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(stage.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// SHA-256 of a byte image.
pub fn fingerprint(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}
