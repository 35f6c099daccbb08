//! Append-only embedding cache.
//!
//! A cache directory holds sealed `seg-NNNNNN.meol` segments. Opening reads all
//! of them into an in-memory index; new entries are buffered and written out
//! as a fresh segment on [`Cache::flush`]. Segments are never modified. One
//! writer at a time holds an exclusive lock on `<dir>/LOCK`.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use super::file::{read_embeddings, write_embeddings, EmbeddingRecord};
use super::{CacheKey, StorageError};

type Bucket = Vec<(String, Arc<[f32]>)>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

#[derive(Debug)]
pub struct Cache {
    dir: Option<PathBuf>,
    _lock: Option<File>,
    // digest -> entries; collisions resolved by full canonical string
    index: RwLock<HashMap<u64, Bucket>>,
    pending: Mutex<Vec<EmbeddingRecord>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl Cache {
    /// Cache that lives only as long as the process.
    pub fn in_memory() -> Self {
        Cache {
            dir: None,
            _lock: None,
            index: RwLock::new(HashMap::new()),
            pending: Mutex::new(Vec::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    /// Opens (creating if needed) a cache directory for reading and writing.
    pub fn open(dir: &Path) -> Result<Self, StorageError> {
        std::fs::create_dir_all(dir)?;
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(dir.join("LOCK"))?;
        lock.try_lock()
            .map_err(|_| StorageError::Locked(dir.display().to_string()))?;
        let mut cache = Self::load(dir)?;
        cache._lock = Some(lock);
        Ok(cache)
    }

    /// Opens sealed segments without taking the writer lock. Inserts stay in
    /// memory.
    pub fn open_read_only(dir: &Path) -> Result<Self, StorageError> {
        let mut cache = Self::load(dir)?;
        cache.dir = None;
        Ok(cache)
    }

    fn load(dir: &Path) -> Result<Self, StorageError> {
        let mut cache = Cache::in_memory();
        cache.dir = Some(dir.to_path_buf());
        {
            let mut index = cache.index.write().expect("cache index poisoned");
            for seg in segments(dir)?.into_values() {
                for rec in read_embeddings(&seg)?.records {
                    insert_into(&mut index, CacheKey::from_canonical(rec.key), rec.values.into());
                }
            }
        }
        Ok(cache)
    }

    pub fn len(&self) -> usize {
        self.index
            .read()
            .expect("cache index poisoned")
            .values()
            .map(Vec::len)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stored vector under exactly `key`, bit-identical to what was inserted.
    pub fn lookup(&self, key: &CacheKey) -> Option<Vec<f32>> {
        let found = self
            .index
            .read()
            .expect("cache index poisoned")
            .get(&key.digest())
            .and_then(|bucket| bucket.iter().find(|(k, _)| k == key.canonical()))
            .map(|(_, v)| v.to_vec());
        let counter = if found.is_some() { &self.hits } else { &self.misses };
        counter.fetch_add(1, Ordering::Relaxed);
        found
    }

    /// Records a vector. Re-inserting an existing key is a no-op.
    pub fn insert(&self, key: &CacheKey, values: &[f32]) {
        let mut index = self.index.write().expect("cache index poisoned");
        if insert_into(&mut index, key.clone(), values.into()) && self.dir.is_some() {
            self.pending
                .lock()
                .expect("cache pending poisoned")
                .push(EmbeddingRecord::new(key.canonical(), values.to_vec()));
        }
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }

    /// Seals buffered entries into new segment files, one per dimension.
    pub fn flush(&self) -> Result<(), StorageError> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let pending = std::mem::take(&mut *self.pending.lock().expect("cache pending poisoned"));
        if pending.is_empty() {
            return Ok(());
        }
        let mut by_dim: BTreeMap<usize, Vec<EmbeddingRecord>> = BTreeMap::new();
        for rec in pending {
            by_dim.entry(rec.values.len()).or_default().push(rec);
        }
        let first = segments(dir)?.keys().next_back().map_or(1, |n| n + 1);
        for (next, (dim, records)) in (first..).zip(by_dim) {
            write_embeddings(&dir.join(format!("seg-{next:06}.meol")), dim as u32, &records)?;
        }
        Ok(())
    }
}

impl Drop for Cache {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

fn insert_into(index: &mut HashMap<u64, Bucket>, key: CacheKey, values: Arc<[f32]>) -> bool {
    let bucket = index.entry(key.digest()).or_default();
    if bucket.iter().any(|(k, _)| k == key.canonical()) {
        return false;
    }
    bucket.push((key.canonical().to_string(), values));
    true
}

fn segments(dir: &Path) -> Result<BTreeMap<u64, PathBuf>, StorageError> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(n) = name
            .strip_prefix("seg-")
            .and_then(|s| s.strip_suffix(".meol"))
            .and_then(|s| s.parse::<u64>().ok())
        {
            out.insert(n, path);
        }
    }
    Ok(out)
}
