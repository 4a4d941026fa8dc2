use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_bytes(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(sha256_bytes(bytes))
}

/// Hex digest of the compact JSON encoding of `value`.
///
/// Struct fields serialize in declaration order and maps should be `BTreeMap`s,
/// so the encoding is canonical for the types hashed in this crate.
pub fn sha256_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    sha256_hex(&bytes)
}

/// Expands a global seed into an independent per-stage seed.
pub fn substream_seed(global: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global.to_le_bytes());
    hasher.update(name.as_bytes());
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}
