use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatRequest, ChatResponse};
use crate::jsonl::write_atomic;

const STRIPES: usize = 64;

#[derive(Serialize)]
struct KeyFields<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    sample_index: u32,
}

/// Hex SHA-256 of the request fields that determine a completion.
/// `max_tokens` is deliberately not part of the key.
pub fn cache_key(req: &ChatRequest) -> String {
    let fields = KeyFields {
        model: &req.model,
        prompt: &req.prompt,
        temperature: req.temperature,
        sample_index: req.sample_index,
    };
    let bytes = serde_json::to_vec(&fields).expect("key fields serialize");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Serialize, Deserialize)]
struct Entry {
    request: ChatRequest,
    response: ChatResponse,
}

/// Content-addressed response store: `<dir>/<key[0..2]>/<key>.json`.
pub struct ResponseCache {
    dir: PathBuf,
    stripes: Vec<Mutex<()>>,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ResponseCache {
            dir: dir.into(),
            stripes: (0..STRIPES).map(|_| Mutex::new(())).collect(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    /// Serializes concurrent misses on the same key so each request reaches the
    /// backend once.
    pub(super) fn lock_key(&self, key: &str) -> MutexGuard<'_, ()> {
        let mut h = DefaultHasher::new();
        key.hash(&mut h);
        let stripe = (h.finish() as usize) % self.stripes.len();
        self.stripes[stripe].lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Corrupt or unreadable entries count as misses.
    pub fn get(&self, key: &str) -> Option<ChatResponse> {
        let path = self.path(key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return None,
            Err(e) => {
                log::warn!("cache entry {} unreadable: {e}", path.display());
                return None;
            }
        };
        match serde_json::from_slice::<Entry>(&bytes) {
            Ok(entry) => Some(entry.response),
            Err(e) => {
                log::warn!("cache entry {} corrupt, ignoring: {e}", path.display());
                None
            }
        }
    }

    pub fn put(&self, key: &str, req: &ChatRequest, resp: &ChatResponse) -> std::io::Result<()> {
        let entry = Entry {
            request: req.clone(),
            response: resp.clone(),
        };
        let bytes = serde_json::to_vec_pretty(&entry).map_err(std::io::Error::other)?;
        write_atomic(&self.path(key), &bytes)
    }
}
