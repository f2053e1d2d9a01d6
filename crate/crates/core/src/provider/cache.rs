//! Content-addressed response cache.
//!
//! Each record lives in `<root>/<k[0..2]>/<k[2..4]>/<k>.json` where `k` is
//! the cache key. A file holds the record plus a SHA-256 digest of the
//! record's JSON; a digest mismatch is treated as a miss and the entry is
//! rewritten.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CompletionProvider, CompletionRecord, CompletionRequest, ProviderError};
use crate::util::{atomic_write, sha256_hex};

#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    key: String,
    digest: String,
    record: CompletionRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheOutcome {
    Hit,
    Miss,
    /// The stored entry failed its digest check and was replaced.
    Corrupt,
}

fn record_digest(record: &CompletionRecord) -> String {
    sha256_hex(serde_json::to_string(record).expect("record serializes").as_bytes())
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ResponseCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Cache key: the request hash, plus the turn for providers whose output
    /// is not a function of the prompt.
    pub fn key_for(provider: &dyn CompletionProvider, request: &CompletionRequest) -> String {
        let hash = request.request_hash();
        match (&request.turn, provider.prompt_determined()) {
            (Some(turn), false) => sha256_hex(
                format!("{hash}\n{}\n{}\n{}", provider.name(), turn.game_id, turn.turn_index).as_bytes(),
            ),
            _ => hash,
        }
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        let (a, b) = (&key[..2.min(key.len())], &key[2.min(key.len())..4.min(key.len())]);
        self.root.join(a).join(b).join(format!("{key}.json"))
    }

    /// `Ok(None)` on a miss; `Err(())` when the entry exists but is corrupt.
    pub fn get(&self, key: &str) -> Result<Option<CompletionRecord>, ()> {
        let path = self.path_for(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(_) => return Err(()),
        };
        let file: CacheFile = serde_json::from_slice(&bytes).map_err(|_| ())?;
        if file.key != key || file.digest != record_digest(&file.record) {
            return Err(());
        }
        Ok(Some(file.record))
    }

    pub fn put(&self, key: &str, record: &CompletionRecord) -> io::Result<()> {
        let file = CacheFile { key: key.to_string(), digest: record_digest(record), record: record.clone() };
        let json = serde_json::to_vec_pretty(&file).map_err(io::Error::other)?;
        atomic_write(&self.path_for(key), &json)
    }

    /// Number of records on disk.
    pub fn len(&self) -> usize {
        fn walk(dir: &Path) -> usize {
            fs::read_dir(dir)
                .map(|rd| {
                    rd.filter_map(Result::ok)
                        .map(|e| {
                            let p = e.path();
                            if p.is_dir() {
                                walk(&p)
                            } else {
                                usize::from(p.extension().is_some_and(|x| x == "json"))
                            }
                        })
                        .sum()
                })
                .unwrap_or(0)
        }
        walk(&self.root)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Serves `request` from `cache` when possible, otherwise asks `provider`
/// and stores the result.
pub fn cached_complete(
    provider: &dyn CompletionProvider,
    request: &CompletionRequest,
    cache: &ResponseCache,
) -> Result<(CompletionRecord, CacheOutcome), ProviderError> {
    let key = ResponseCache::key_for(provider, request);
    let outcome = match cache.get(&key) {
        Ok(Some(record)) => return Ok((record, CacheOutcome::Hit)),
        Ok(None) => CacheOutcome::Miss,
        Err(()) => {
            log::warn!("cache entry {key} failed its integrity check; refetching");
            CacheOutcome::Corrupt
        }
    };
    let record = provider.complete(request)?;
    if let Err(e) = cache.put(&key, &record) {
        log::warn!("could not write cache entry {key}: {e}");
    }
    Ok((record, outcome))
}
