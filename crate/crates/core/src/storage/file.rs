//! `MEOL` embedding file.
//!
//! ```text
//! header : "MEOL" | version u8 = 1 | flags u8 | dim u32 LE | count u64 LE
//! record : key_len u16 LE | key (UTF-8) | dim x f32 LE
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::StorageError;

pub const MAGIC: &[u8; 4] = b"MEOL";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub key: String,
    pub values: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn new(key: impl Into<String>, values: Vec<f32>) -> Self {
        EmbeddingRecord {
            key: key.into(),
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub flags: u8,
    pub dim: u32,
    pub records: Vec<EmbeddingRecord>,
}

/// Serializes records; all must share `dim` and have distinct keys.
pub fn encode(dim: u32, flags: u8, records: &[EmbeddingRecord]) -> Result<Vec<u8>, StorageError> {
    let mut seen = HashSet::with_capacity(records.len());
    let mut out = Vec::with_capacity(HEADER_LEN + records.len() * (2 + 32 + 4 * dim as usize));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(flags);
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for rec in records {
        if !seen.insert(rec.key.as_str()) {
            return Err(StorageError::DuplicateKey(rec.key.clone()));
        }
        if rec.values.len() != dim as usize {
            return Err(StorageError::DimMismatch {
                key: rec.key.clone(),
                expected: dim as usize,
                found: rec.values.len(),
            });
        }
        let key_len = u16::try_from(rec.key.len()).map_err(|_| StorageError::KeyTooLong(rec.key.len()))?;
        out.extend_from_slice(&key_len.to_le_bytes());
        out.extend_from_slice(rec.key.as_bytes());
        for v in &rec.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StorageError> {
        if self.buf.len() - self.pos < n {
            return Err(StorageError::TruncatedFile {
                offset: self.pos as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], StorageError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode(buf: &[u8]) -> Result<EmbeddingFile, StorageError> {
    let mut cur = Cursor { buf, pos: 0 };
    let seen_magic = buf.len().min(MAGIC.len());
    if buf[..seen_magic] != MAGIC[..seen_magic] {
        return Err(StorageError::BadMagic);
    }
    cur.take(4)?;
    let version = cur.array::<1>()?[0];
    if version != VERSION {
        return Err(StorageError::UnsupportedVersion(version));
    }
    let flags = cur.array::<1>()?[0];
    let dim = u32::from_le_bytes(cur.array()?);
    let count = u64::from_le_bytes(cur.array()?);
    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    let mut seen = HashSet::new();
    for _ in 0..count {
        let record_start = cur.pos as u64;
        let key_len = u16::from_le_bytes(cur.array()?) as usize;
        let key = std::str::from_utf8(cur.take(key_len)?)
            .map_err(|_| StorageError::BadKey { offset: record_start })?
            .to_string();
        let payload = cur.take(dim as usize * 4)?;
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        if !seen.insert(key.clone()) {
            return Err(StorageError::DuplicateKey(key));
        }
        records.push(EmbeddingRecord { key, values });
    }
    if cur.pos != buf.len() {
        return Err(StorageError::TrailingBytes { offset: cur.pos as u64 });
    }
    Ok(EmbeddingFile { flags, dim, records })
}

/// Writes to `<path>.tmp` then renames, so readers never see a partial file.
pub fn write_embeddings(path: &Path, dim: u32, records: &[EmbeddingRecord]) -> Result<(), StorageError> {
    let bytes = encode(dim, 0, records)?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&bytes)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile, StorageError> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

/// One line per record: `key<TAB>dim<TAB>` followed by up to four values.
pub fn dump(file: &EmbeddingFile) -> String {
    let mut out = String::new();
    for rec in &file.records {
        out.push_str(&rec.key);
        out.push('\t');
        out.push_str(&file.dim.to_string());
        for v in rec.values.iter().take(4) {
            out.push('\t');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}
