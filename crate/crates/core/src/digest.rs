//! Short content digests for flow traces.

use alloc::string::String;
use core::fmt::Write as _;

use sha2::{Digest, Sha256};

/// First 16 hex characters of the SHA-256 of `text`.
pub fn short_digest(text: &str) -> String {
    let hash = Sha256::digest(text.as_bytes());
    let mut out = String::with_capacity(16);
    for byte in &hash[..8] {
        let _ = write!(out, "{byte:02x}");
    }
    out
}
