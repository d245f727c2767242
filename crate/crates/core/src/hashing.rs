//! Stable content hashing used for episode ids, request hashes and golden images.

use sha2::{Digest, Sha256};

/// Incremental SHA-256 with length-prefixed fields so that field boundaries
/// are part of the digest.
#[derive(Default, Clone)]
pub struct StableHasher {
    inner: Sha256,
}

impl StableHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, data: &[u8]) -> &mut Self {
        self.inner.update((data.len() as u64).to_le_bytes());
        self.inner.update(data);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.inner.update(v.to_le_bytes());
        self
    }

    pub fn finish(&self) -> [u8; 32] {
        self.inner.clone().finalize().into()
    }

    pub fn hex(&self) -> String {
        to_hex(&self.finish())
    }
}

pub fn to_hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Lowercase hex SHA-256 of raw bytes.
pub fn content_hash(data: &[u8]) -> String {
    to_hex(&Sha256::digest(data))
}

/// First 8 bytes of a digest, for RNG seeding.
pub fn seed_from(hasher: &StableHasher) -> u64 {
    let d = hasher.finish();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
