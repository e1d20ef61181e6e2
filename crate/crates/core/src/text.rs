//! Text normalization shared by chunking, embedding and metrics.
//!
//! A *token* throughout this crate is a whitespace-delimited word after
//! Unicode NFC normalization. Chunk boundaries, ROUGE-L and the hash
//! embedder all depend on this definition, so it lives in one place.

use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

/// NFC-normalizes `text`.
pub fn nfc(text: &str) -> String {
    text.nfc().collect()
}

/// Splits NFC-normalized text into whitespace-delimited tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    nfc(text).split_whitespace().map(str::to_owned).collect()
}

/// NFC, trim, and collapse internal whitespace runs to a single space.
pub fn collapse_whitespace(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Full lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Short content digest used in trace steps.
pub fn digest(text: &str) -> String {
    let mut full = sha256_hex(text.as_bytes());
    full.truncate(16);
    full
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_on_any_whitespace() {
        assert_eq!(tokenize("  a\tb\n\nc  "), vec!["a", "b", "c"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn nfc_merges_combining_marks() {
        // "e" + combining acute vs precomposed "é"
        assert_eq!(tokenize("caf\u{65}\u{301}"), tokenize("caf\u{e9}"));
    }

    #[test]
    fn digest_is_stable_and_short() {
        assert_eq!(digest("abc"), "ba7816bf8f01cfea");
    }
}
