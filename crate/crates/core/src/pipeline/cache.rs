//! Write-once caption store, persisted as JSONL.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::GeneratedCaptions;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheProvenance {
    pub backend: String,
    pub fallback: bool,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub video_id: String,
    pub prompt_fp: String,
    pub k: usize,
    pub captions: Vec<String>,
    pub provenance: CacheProvenance,
}

impl CacheEntry {
    pub fn from_generated(g: &GeneratedCaptions, k: usize) -> Self {
        Self {
            video_id: g.set.video_id.clone(),
            prompt_fp: g.set.prompt_fingerprint.clone(),
            k,
            captions: g.set.captions.clone(),
            provenance: CacheProvenance {
                backend: g.provenance.backend.clone(),
                fallback: g.provenance.fallback,
                timestamp: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            },
        }
    }

    fn key(&self) -> (String, String, usize) {
        (self.video_id.clone(), self.prompt_fp.clone(), self.k)
    }

    /// Everything except the write time.
    fn same_content(&self, other: &CacheEntry) -> bool {
        self.captions == other.captions
            && self.provenance.backend == other.provenance.backend
            && self.provenance.fallback == other.provenance.fallback
    }
}

/// Entries keyed by `(video_id, prompt fingerprint, k)`. With a backing
/// file, every new entry is appended as one line.
#[derive(Debug, Default)]
pub struct CaptionCache {
    entries: BTreeMap<(String, String, usize), CacheEntry>,
    path: Option<PathBuf>,
}

impl CaptionCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or starts) a cache file. A missing file is an empty cache.
    pub fn open(path: &Path) -> Result<Self> {
        let mut cache = Self {
            entries: BTreeMap::new(),
            path: None,
        };
        if path.exists() {
            let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheEntry = serde_json::from_str(line)
                    .map_err(|e| Error::Validation(format!("{}: line {}: {e}", path.display(), i + 1)))?;
                cache.insert(entry)?;
            }
        }
        cache.path = Some(path.to_path_buf());
        Ok(cache)
    }

    /// Opens an existing cache file; a missing file is a missing
    /// prerequisite.
    pub fn open_existing(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPrerequisite {
                artifact: path.display().to_string(),
                producer: "caption".into(),
            });
        }
        Self::open(path)
    }

    /// Stores an entry. Re-inserting identical content is a no-op; different
    /// content under an existing key is a conflict.
    pub fn insert(&mut self, entry: CacheEntry) -> Result<()> {
        let key = entry.key();
        if let Some(old) = self.entries.get(&key) {
            if old.same_content(&entry) {
                return Ok(());
            }
            return Err(Error::CacheConflict(format!(
                "video {} prompt {} k={}",
                key.0, key.1, key.2
            )));
        }
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let line = serde_json::to_string(&entry)? + "\n";
            f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        self.entries.insert(key, entry);
        Ok(())
    }

    pub fn get(&self, video_id: &str, prompt_fp: &str, k: usize) -> Option<&CacheEntry> {
        self.entries.get(&(video_id.to_string(), prompt_fp.to_string(), k))
    }

    /// Captions of every cached video under one prompt and `k`.
    pub fn captions_for(&self, prompt_fp: &str, k: usize) -> HashMap<String, Vec<String>> {
        self.entries
            .values()
            .filter(|e| e.prompt_fp == prompt_fp && e.k == k)
            .map(|e| (e.video_id.clone(), e.captions.clone()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(caps: &[&str], ts: u64) -> CacheEntry {
        CacheEntry {
            video_id: "v1".into(),
            prompt_fp: "ab".into(),
            k: caps.len(),
            captions: caps.iter().map(|s| s.to_string()).collect(),
            provenance: CacheProvenance {
                backend: "mock".into(),
                fallback: false,
                timestamp: ts,
            },
        }
    }

    #[test]
    fn write_once_semantics() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("captions.jsonl");
        let mut c = CaptionCache::open(&path).unwrap();
        c.insert(entry(&["a", "b"], 1)).unwrap();
        c.insert(entry(&["a", "b"], 2)).unwrap();
        assert!(matches!(c.insert(entry(&["a", "c"], 3)), Err(Error::CacheConflict(_))));
        let reopened = CaptionCache::open(&path).unwrap();
        assert_eq!(reopened.len(), 1);
        assert_eq!(reopened.get("v1", "ab", 2).unwrap().captions, vec!["a", "b"]);
        assert!(reopened.get("v1", "ab", 3).is_none());
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
    }

    #[test]
    fn missing_file_is_a_prerequisite_error() {
        let err = CaptionCache::open_existing(Path::new("/nonexistent/c.jsonl")).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }
}
