//! Small text and hashing helpers shared by several modules.

use sha2::{Digest, Sha256};

/// Default characters-per-token ratio for the token heuristic.
pub const DEFAULT_CHARS_PER_TOKEN: usize = 4;

/// `ceil(chars / chars_per_token)` over Unicode scalar values.
pub fn estimate_tokens(text: &str, chars_per_token: usize) -> usize {
    let per = chars_per_token.max(1);
    text.chars().count().div_ceil(per)
}

/// Lowercase word tokens; every non-alphanumeric character is a separator.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Stable 64-bit hash: the first eight bytes of SHA-256, big-endian.
pub fn stable_hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(head)
}

pub(crate) fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '$'
}
