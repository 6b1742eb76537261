//! SHA-256 content digests used throughout the pipeline.
//!
//! Everything that participates in reproducibility checks (workflow
//! documents, staged files, archive entries, image cache keys) is addressed
//! by the same 64-character lowercase hex digest type.

use std::fmt;
use std::fs::File;
use std::io::{self, Read};
use std::path::Path;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

/// A SHA-256 digest rendered as 64 lowercase hex characters.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(String);

impl Digest {
    /// Hashes a byte slice.
    pub fn of_bytes(data: impl AsRef<[u8]>) -> Digest {
        let mut hasher = Sha256::new();
        hasher.update(data.as_ref());
        Digest(hex::encode(hasher.finalize()))
    }

    /// Hashes a file by streaming its contents.
    pub fn of_file(path: &Path) -> io::Result<Digest> {
        let mut file = File::open(path)?;
        let mut hasher = Sha256::new();
        let mut buf = [0u8; 64 * 1024];
        loop {
            let n = file.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        Ok(Digest(hex::encode(hasher.finalize())))
    }

    /// Accepts an existing 64-char lowercase hex string.
    pub fn parse(s: &str) -> Result<Digest, String> {
        if s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            Ok(Digest(s.to_string()))
        } else {
            Err(format!("not a lowercase sha256 hex digest: {s:?}"))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// First eight hex characters, for compact human output.
    pub fn short(&self) -> &str {
        &self.0[..8]
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.0)
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Digest::parse(&s).map_err(D::Error::custom)
    }
}

/// Convenience wrapper returning the raw hex string.
pub fn sha256_hex(data: impl AsRef<[u8]>) -> String {
    Digest::of_bytes(data).0
}
