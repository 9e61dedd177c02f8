//! Append-only completion cache.
//!
//! Layout under the cache directory:
//!
//! ```text
//! records/<key>.json   one CompletionRecord per request digest
//! index.tsv            key, model id, message count, attachment count
//! ```
//!
//! Records are never rewritten. Reads take no lock; writes go through one
//! mutex and land via write-to-temp + rename.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LlmError, SamplingParams};
use crate::prompt::Message;

/// Digest reference to an attached file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttachmentRef {
    /// Index of the message the attachment belongs to.
    pub message_index: usize,
    pub media_type: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordMetadata {
    pub latency_ms: Option<u64>,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub top_k_transmitted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub cache_key: String,
    pub model_id: String,
    pub sampling: SamplingParams,
    pub messages: Vec<Message>,
    pub attachments: Vec<AttachmentRef>,
    pub response_text: String,
    pub metadata: RecordMetadata,
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    v: u32,
    model_id: &'a str,
    sampling: &'a SamplingParams,
    messages: &'a [Message],
    attachments: &'a [AttachmentRef],
}

/// SHA-256 (lowercase hex) of the compact JSON object
/// `{"v":1,"model_id":..,"sampling":{"temperature":..,"top_k":..,"top_p":..,"max_output_tokens":..},"messages":[{"role":..,"content":..},..],"attachments":[{"message_index":..,"media_type":..,"sha256":..},..]}`
/// with fields in exactly that order. Run seeds are deliberately absent.
pub fn cache_key(
    model_id: &str,
    params: &SamplingParams,
    messages: &[Message],
    attachments: &[AttachmentRef],
) -> String {
    let material = KeyMaterial { v: 1, model_id, sampling: params, messages, attachments };
    let bytes = serde_json::to_vec(&material).expect("key material serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("records")).map_err(|e| LlmError::cache(&dir, e))?;
        Ok(ResponseCache { dir, write_lock: Mutex::new(()) })
    }

    /// Opens an existing cache without creating anything.
    pub fn open_existing(dir: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let dir = dir.into();
        if !dir.join("records").is_dir() {
            return Err(LlmError::cache(
                &dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no records/ directory"),
            ));
        }
        Ok(ResponseCache { dir, write_lock: Mutex::new(()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn record_path(&self, key: &str) -> PathBuf {
        self.dir.join("records").join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CompletionRecord>, LlmError> {
        let path = self.record_path(key);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| LlmError::cache(&path, std::io::Error::new(std::io::ErrorKind::InvalidData, e))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(LlmError::cache(&path, e)),
        }
    }

    /// Stores a record unless its key is already present.
    pub fn put(&self, record: &CompletionRecord) -> Result<(), LlmError> {
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        let path = self.record_path(&record.cache_key);
        if path.exists() {
            return Ok(());
        }
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_vec_pretty(record).expect("record serializes");
        fs::write(&tmp, body).map_err(|e| LlmError::cache(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| LlmError::cache(&path, e))?;
        let index = self.dir.join("index.tsv");
        let mut f =
            fs::OpenOptions::new().create(true).append(true).open(&index).map_err(|e| LlmError::cache(&index, e))?;
        writeln!(
            f,
            "{}\t{}\t{}\t{}",
            record.cache_key,
            record.model_id,
            record.messages.len(),
            record.attachments.len()
        )
        .map_err(|e| LlmError::cache(&index, e))
    }

    pub fn len(&self) -> usize {
        fs::read_dir(self.dir.join("records"))
            .map(|rd| rd.filter_map(Result::ok).filter(|e| e.path().extension().is_some_and(|x| x == "json")).count())
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
