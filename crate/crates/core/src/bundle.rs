//! Content checksums and the versioned JSON container shared by model,
//! MoE and fingerprint exports.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// 64-bit content checksum: the first eight bytes (big-endian) of SHA-256.
#[derive(Default, Clone)]
pub struct Digest64(Sha256);

impl Digest64 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.0.update(b);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.update(v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        self.u64(vs.len() as u64);
        for v in vs {
            self.0.update(v.to_bits().to_le_bytes());
        }
        self
    }

    pub fn finish(&self) -> u64 {
        let out = self.0.clone().finalize();
        u64::from_be_bytes(out[..8].try_into().expect("sha256 has 32 bytes"))
    }
}

pub fn checksum_hex(c: u64) -> String {
    format!("{c:016x}")
}

/// On-disk container. The checksum covers the canonical JSON of `payload`.
#[derive(Debug, Serialize, Deserialize)]
pub struct Bundle<T> {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub checksum: String,
    pub payload: T,
}

pub fn payload_checksum<T: Serialize>(payload: &T) -> Result<u64> {
    let bytes = serde_json::to_vec(payload)?;
    Ok(Digest64::new().bytes(&bytes).finish())
}

impl<T: Serialize + DeserializeOwned> Bundle<T> {
    pub fn wrap(kind: &str, payload: T) -> Result<Self> {
        let checksum = checksum_hex(payload_checksum(&payload)?);
        Ok(Self {
            format: "routeprint".into(),
            version: FORMAT_VERSION,
            kind: kind.into(),
            checksum,
            payload,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(kind: &str, text: &str) -> Result<Self> {
        let b: Bundle<T> = serde_json::from_str(text)?;
        if b.format != "routeprint" || b.version != FORMAT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported bundle format {} v{}",
                b.format, b.version
            )));
        }
        if b.kind != kind {
            return Err(Error::Serde(format!("expected a {kind} bundle, found {}", b.kind)));
        }
        let actual = checksum_hex(payload_checksum(&b.payload)?);
        if actual != b.checksum {
            return Err(Error::Serde(format!(
                "checksum mismatch: stored {} computed {actual}",
                b.checksum
            )));
        }
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(kind: &str, path: &Path) -> Result<Self> {
        Self::from_json(kind, &fs::read_to_string(path)?)
    }
}
