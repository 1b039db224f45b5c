//! Stable hashing helpers shared by fingerprints, checksums and caption embeddings.

use sha2::{Digest, Sha256};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over `bytes`, starting from an offset mixed with `seed`.
pub fn fnv1a64(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ seed.wrapping_mul(FNV_PRIME);
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Incremental SHA-256 whose digest is reported either in full or as a 64-bit hex prefix.
#[derive(Default, Clone)]
pub struct Fingerprinter {
    inner: Sha256,
}

impl Fingerprinter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.inner.update((s.len() as u64).to_le_bytes());
        self.inner.update(s.as_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.inner.update(v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, values: &[f64]) -> &mut Self {
        self.inner.update((values.len() as u64).to_le_bytes());
        for v in values {
            self.inner.update(v.to_le_bytes());
        }
        self
    }

    pub fn shape(&mut self, dims: &[usize]) -> &mut Self {
        self.u64(dims.len() as u64);
        for d in dims {
            self.u64(*d as u64);
        }
        self
    }

    pub fn hex64(&self) -> String {
        let digest = self.inner.clone().finalize();
        hex_string(&digest[..8])
    }

    pub fn hex256(&self) -> String {
        let digest = self.inner.clone().finalize();
        hex_string(&digest)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex_string(&Sha256::digest(bytes))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_is_seed_sensitive() {
        assert_ne!(fnv1a64(0, b"ball"), fnv1a64(1, b"ball"));
        assert_eq!(fnv1a64(7, b"ball"), fnv1a64(7, b"ball"));
    }

    #[test]
    fn hex64_has_sixteen_digits() {
        let mut fp = Fingerprinter::new();
        fp.str("codec").u64(3);
        assert_eq!(fp.hex64().len(), 16);
        assert!(fp.hex256().starts_with(&fp.hex64()));
    }
}
