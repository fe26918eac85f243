use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// First eight bytes of the SHA-256 of `bytes`, big-endian. Used to derive seeds.
pub fn sha256_u64(bytes: impl AsRef<[u8]>) -> u64 {
    let d = Sha256::digest(bytes.as_ref());
    u64::from_be_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}
