//! Append-only JSONL record store backing the completion and NLI caches.
//!
//! Records are buffered in memory and written out in batches. Each batch
//! becomes a new segment file, written to a temporary name, synced and then
//! renamed, so a crash leaves either a complete segment or none at all.
//! Existing records are never rewritten except by [`SegmentCache::compact`].

use std::collections::HashMap;
use std::fs::{self, File};
use std::hash::Hash;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt cache record in {path} line {line}: {source}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CacheError + '_ {
    move |source| CacheError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Serialize, Deserialize)]
struct Record<K, V> {
    key: K,
    value: V,
}

const DEFAULT_BATCH: usize = 64;
const COMPACT_THRESHOLD: usize = 256;

pub struct SegmentCache<K, V>
where
    K: Serialize + DeserializeOwned + Eq + Hash + Clone,
    V: Serialize + DeserializeOwned + Clone,
{
    dir: PathBuf,
    prefix: String,
    entries: RwLock<HashMap<K, V>>,
    writer: Mutex<Writer<K, V>>,
    batch_size: usize,
}

struct Writer<K, V> {
    pending: Vec<Record<K, V>>,
    next_segment: u64,
}

impl<K, V> SegmentCache<K, V>
where
    K: Serialize + DeserializeOwned + Eq + Hash + Clone,
    V: Serialize + DeserializeOwned + Clone,
{
    /// Opens (or creates) the cache whose segments are `dir/<prefix>-*.jsonl`.
    pub fn open(dir: impl Into<PathBuf>, prefix: &str) -> Result<Self, CacheError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let segments = list_segments(&dir, prefix)?;
        let mut entries = HashMap::new();
        for (_, path) in &segments {
            let file = File::open(path).map_err(io_err(path))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io_err(path))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: Record<K, V> = serde_json::from_str(&line).map_err(|source| CacheError::Corrupt {
                    path: path.clone(),
                    line: i + 1,
                    source,
                })?;
                entries.entry(rec.key).or_insert(rec.value);
            }
        }
        let next_segment = segments.last().map_or(0, |(n, _)| n + 1);
        let cache = Self {
            dir,
            prefix: prefix.to_owned(),
            entries: RwLock::new(entries),
            writer: Mutex::new(Writer {
                pending: Vec::new(),
                next_segment,
            }),
            batch_size: DEFAULT_BATCH,
        };
        if segments.len() > COMPACT_THRESHOLD {
            cache.compact()?;
        }
        Ok(cache)
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn get(&self, key: &K) -> Option<V> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn contains(&self, key: &K) -> bool {
        self.entries.read().unwrap().contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inserts unless the key is already present. Returns whether the record
    /// was new.
    pub fn insert(&self, key: K, value: V) -> Result<bool, CacheError> {
        {
            let mut entries = self.entries.write().unwrap();
            if entries.contains_key(&key) {
                return Ok(false);
            }
            entries.insert(key.clone(), value.clone());
        }
        let mut w = self.writer.lock().unwrap();
        w.pending.push(Record { key, value });
        if w.pending.len() >= self.batch_size {
            self.write_segment(&mut w)?;
        }
        Ok(true)
    }

    pub fn flush(&self) -> Result<(), CacheError> {
        let mut w = self.writer.lock().unwrap();
        self.write_segment(&mut w)
    }

    /// Rewrites every record into a single segment and removes the rest.
    pub fn compact(&self) -> Result<(), CacheError> {
        let mut w = self.writer.lock().unwrap();
        w.pending.clear();
        let old = list_segments(&self.dir, &self.prefix)?;
        let entries = self.entries.read().unwrap();
        let records: Vec<_> = entries.iter().map(|(key, value)| Record { key, value }).collect();
        let seq = w.next_segment;
        self.write_records(seq, &records)?;
        w.next_segment += 1;
        for (_, path) in old {
            fs::remove_file(&path).map_err(io_err(&path))?;
        }
        Ok(())
    }

    fn write_segment(&self, w: &mut Writer<K, V>) -> Result<(), CacheError> {
        if w.pending.is_empty() {
            return Ok(());
        }
        let seq = w.next_segment;
        self.write_records(seq, &w.pending)?;
        w.next_segment += 1;
        w.pending.clear();
        Ok(())
    }

    fn write_records<R: Serialize>(&self, seq: u64, records: &[R]) -> Result<(), CacheError> {
        let final_path = self.dir.join(format!("{}-{seq:08}.jsonl", self.prefix));
        let tmp_path = self.dir.join(format!("{}-{seq:08}.jsonl.tmp", self.prefix));
        let file = File::create(&tmp_path).map_err(io_err(&tmp_path))?;
        let mut out = BufWriter::new(file);
        for rec in records {
            serde_json::to_writer(&mut out, rec).map_err(|e| CacheError::Io {
                path: tmp_path.clone(),
                source: e.into(),
            })?;
            out.write_all(b"\n").map_err(io_err(&tmp_path))?;
        }
        let file = out.into_inner().map_err(|e| CacheError::Io {
            path: tmp_path.clone(),
            source: e.into_error(),
        })?;
        file.sync_all().map_err(io_err(&tmp_path))?;
        fs::rename(&tmp_path, &final_path).map_err(io_err(&final_path))?;
        Ok(())
    }
}

impl<K, V> Drop for SegmentCache<K, V>
where
    K: Serialize + DeserializeOwned + Eq + Hash + Clone,
    V: Serialize + DeserializeOwned + Clone,
{
    fn drop(&mut self) {
        if let Err(e) = self.flush() {
            log::warn!("cache `{}` failed to flush on drop: {e}", self.prefix);
        }
    }
}

fn list_segments(dir: &Path, prefix: &str) -> Result<Vec<(u64, PathBuf)>, CacheError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(rest) = name.strip_prefix(prefix).and_then(|r| r.strip_prefix('-')) else {
            continue;
        };
        if let Some(num) = rest.strip_suffix(".jsonl") {
            if let Ok(n) = num.parse::<u64>() {
                out.push((n, entry.path()));
            }
        } else if rest.ends_with(".jsonl.tmp") {
            // Leftover from an interrupted batch write.
            let _ = fs::remove_file(entry.path());
        }
    }
    out.sort();
    Ok(out)
}
