//! Persistence: the `MEOL` embedding file format and the per-prompt
//! embedding cache built on it.

mod cache;
mod file;

pub use cache::{Cache, CacheStats};
pub use file::{
    decode, dump, encode, read_embeddings, write_embeddings, EmbeddingFile, EmbeddingRecord, HEADER_LEN, MAGIC, VERSION,
};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::fnv1a64;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("not an embedding file (bad magic)")]
    BadMagic,
    #[error("unsupported embedding file version {0}")]
    UnsupportedVersion(u8),
    #[error("embedding file truncated at byte offset {offset}")]
    TruncatedFile { offset: u64 },
    #[error("unexpected trailing bytes at offset {offset}")]
    TrailingBytes { offset: u64 },
    #[error("record at offset {offset} has a key that is not valid UTF-8")]
    BadKey { offset: u64 },
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("record `{key}` has {found} values, file dimension is {expected}")]
    DimMismatch { key: String, expected: usize, found: usize },
    #[error("key of {0} bytes does not fit the u16 length field")]
    KeyTooLong(usize),
    #[error("cache at {0} is locked by another writer")]
    Locked(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Identity of one raw per-prompt embedding.
///
/// The canonical form is `model_id|template_id|layer_index|sha256_hex(sentence)`;
/// the sentence itself never appears in the key.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    canonical: String,
    digest: u64,
}

impl CacheKey {
    pub fn new(model_id: &str, template_id: &str, layer_index: i32, sentence: &str) -> Self {
        let sentence_hash = hex::encode(Sha256::digest(sentence.as_bytes()));
        Self::from_canonical(format!("{model_id}|{template_id}|{layer_index}|{sentence_hash}"))
    }

    pub fn from_canonical(canonical: String) -> Self {
        let digest = fnv1a64(canonical.as_bytes());
        CacheKey { canonical, digest }
    }

    pub fn canonical(&self) -> &str {
        &self.canonical
    }

    pub fn digest(&self) -> u64 {
        self.digest
    }
}

pub fn cache_key(model_id: &str, template_id: &str, layer_index: i32, sentence: &str) -> CacheKey {
    CacheKey::new(model_id, template_id, layer_index, sentence)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_key() {
        let k = cache_key("m", "t", -3, "a");
        assert_eq!(
            k.canonical(),
            "m|t|-3|ca978112ca1bbdcafac231b39a23dc4da786eff8147c4e72b9807785afee48bb"
        );
        assert_eq!(k.digest(), fnv1a64(k.canonical().as_bytes()));
    }

    #[test]
    fn one_byte_changes_key() {
        assert_ne!(cache_key("m", "t", -1, "ab"), cache_key("m", "t", -1, "ac"));
        assert_ne!(cache_key("m", "t", -1, "a"), cache_key("m", "t", -2, "a"));
    }
}
