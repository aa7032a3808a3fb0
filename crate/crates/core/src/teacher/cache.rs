use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatBackend, CompletionRequest, CompletionResponse, Source, TeacherError, Usage, UsageLedger};

/// Cache key: SHA-256 over the canonical JSON of everything that can change
/// the response. Mock hints are deliberately excluded.
pub fn request_key(request: &CompletionRequest) -> String {
    #[derive(Serialize)]
    struct KeyFields<'a> {
        model: &'a str,
        prompt_text: &'a str,
        temperature: f32,
        max_output: u32,
    }
    let canonical = serde_json::to_vec(&KeyFields {
        model: &request.model,
        prompt_text: &request.prompt_text,
        temperature: request.temperature,
        max_output: request.max_output,
    })
    .expect("key fields serialize");
    hex::encode(Sha256::digest(&canonical))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub model: String,
    pub prompt_text: String,
    pub temperature: f32,
    pub max_output: u32,
    pub text: String,
    pub usage: Usage,
}

impl CacheRecord {
    fn matches(&self, request: &CompletionRequest) -> bool {
        self.model == request.model
            && self.prompt_text == request.prompt_text
            && self.temperature == request.temperature
            && self.max_output == request.max_output
    }
}

/// Content-addressed replay cache, one JSON file per request key.
///
/// Entries are written once through a temp file and rename. If a later write
/// for the same key carries different bytes the existing entry is kept and the
/// conflict is counted.
pub struct ResponseCache {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    conflicts: AtomicU64,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            locks: Mutex::new(HashMap::new()),
            conflicts: AtomicU64::new(0),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn conflicts(&self) -> u64 {
        self.conflicts.load(Ordering::Relaxed)
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .unwrap()
            .entry(key.to_string())
            .or_default()
            .clone()
    }

    /// Reads an entry. Corrupt or mismatching files count as a miss.
    pub fn get(&self, request: &CompletionRequest) -> Option<CacheRecord> {
        let key = request_key(request);
        let path = self.path_for(&key);
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice::<CacheRecord>(&bytes) {
            Ok(rec) if rec.matches(request) => Some(rec),
            Ok(_) => {
                log::warn!("cache entry {} does not match its request; ignoring", path.display());
                None
            }
            Err(e) => {
                log::warn!("corrupt cache entry {}: {e}; refetching", path.display());
                None
            }
        }
    }

    /// Stores an entry unless one with different content is already present.
    pub fn put(&self, record: &CacheRecord) -> std::io::Result<()> {
        let req = CompletionRequest {
            model: record.model.clone(),
            prompt_text: record.prompt_text.clone(),
            temperature: record.temperature,
            max_output: record.max_output,
            hints: None,
        };
        let key = request_key(&req);
        let path = self.path_for(&key);
        let bytes = serde_json::to_vec_pretty(record).expect("cache record serializes");
        if let Ok(existing) = fs::read(&path) {
            if existing == bytes {
                return Ok(());
            }
            if serde_json::from_slice::<CacheRecord>(&existing)
                .map(|r| r.matches(&req))
                .unwrap_or(false)
            {
                self.conflicts.fetch_add(1, Ordering::Relaxed);
                log::warn!(
                    "cache conflict for key {key}: a different response is already stored; keeping the original"
                );
                return Ok(());
            }
        }
        let tmp = self.dir.join(format!(".{key}.{}.tmp", std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)
    }

    /// Replays a stored response or calls the backend and stores the result.
    /// Every call, hit or miss, is recorded in the ledger.
    pub fn cached_complete(
        &self,
        backend: &dyn ChatBackend,
        request: &CompletionRequest,
        ledger: &UsageLedger,
    ) -> Result<CompletionResponse, TeacherError> {
        request.validate()?;
        let key = request_key(request);
        let lock = self.key_lock(&key);
        let _guard = lock.lock().unwrap();

        if let Some(rec) = self.get(request) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            let response = CompletionResponse {
                text: rec.text,
                usage: rec.usage,
                source: Source::Cache,
            };
            ledger.record(&request.model, &response, 0.0);
            return Ok(response);
        }

        self.misses.fetch_add(1, Ordering::Relaxed);
        let started = Instant::now();
        let response = backend.complete(request)?;
        ledger.record(&request.model, &response, started.elapsed().as_secs_f64());
        let record = CacheRecord {
            model: request.model.clone(),
            prompt_text: request.prompt_text.clone(),
            temperature: request.temperature,
            max_output: request.max_output,
            text: response.text.clone(),
            usage: response.usage,
        };
        if let Err(e) = self.put(&record) {
            log::warn!("could not write cache entry {key}: {e}");
        }
        Ok(response)
    }
}
