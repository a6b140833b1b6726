use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::{BackendConfig, CompletionRecord};
use crate::error::Result;
use crate::jsonl::write_atomic;
use crate::text::sha256_hex;

/// On-disk cache record. Immutable once written.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub prompt_hash: String,
    pub backend_id: String,
    pub model_name: String,
    pub response: String,
    pub integrity: String,
}

fn integrity_of(prompt_hash: &str, response: &str) -> String {
    sha256_hex(format!("{prompt_hash}\0{response}").as_bytes())
}

pub fn cache_entry_path(cache_dir: &Path, prompt_hash: &str) -> PathBuf {
    cache_dir.join(format!("{prompt_hash}.json"))
}

/// A valid entry, or `None`. Corrupt entries are removed so the caller
/// refetches and rewrites them.
pub(super) fn lookup(cache_dir: &Path, prompt_hash: &str) -> Option<CacheEntry> {
    let path = cache_entry_path(cache_dir, prompt_hash);
    let text = fs::read_to_string(&path).ok()?;
    let ok = serde_json::from_str::<CacheEntry>(&text)
        .ok()
        .filter(|e| e.prompt_hash == prompt_hash && e.integrity == integrity_of(&e.prompt_hash, &e.response));
    if ok.is_none() {
        warn!("cache entry {} is corrupt; discarding", path.display());
        let _ = fs::remove_file(&path);
    }
    ok
}

pub(super) fn store(cache_dir: &Path, cfg: &BackendConfig, record: &CompletionRecord) -> Result<()> {
    let entry = CacheEntry {
        prompt_hash: record.prompt_hash.clone(),
        backend_id: cfg.backend_id.clone(),
        model_name: cfg.model_name.clone(),
        response: record.response.clone(),
        integrity: integrity_of(&record.prompt_hash, &record.response),
    };
    let bytes = serde_json::to_vec(&entry)?;
    write_atomic(&cache_entry_path(cache_dir, &record.prompt_hash), &bytes)
}
