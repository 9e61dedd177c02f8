//! Chat-completion client with bounded retries and record/replay caching.
//!
//! Wire format is the common JSON chat-completion dialect: the request
//! carries `model`, `messages` (role/content), `temperature`, `top_p`,
//! `max_tokens` and, when the backend accepts it, `top_k`; the reply text is
//! read from `choices[0].message.content`. Images travel as a data-URL
//! `image_url` content part on the last user message.
//!
//! Client errors are returned as errors. The harness never maps them to a
//! class.

mod cache;
mod transport;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use cache::{cache_key, sha256_hex, AttachmentRef, CompletionRecord, RecordMetadata, ResponseCache};
pub use transport::{FnTransport, HttpRequest, HttpResponse, NoNetwork, Transport, TransportError, UreqTransport};

use crate::prompt::{Message, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_k: u32,
    pub top_p: f64,
    pub max_output_tokens: u32,
}

impl Default for SamplingParams {
    /// Near-greedy decoding.
    fn default() -> Self {
        SamplingParams { temperature: 0.01, top_k: 50, top_p: 1.0, max_output_tokens: 512 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint_url: String,
    pub model_id: String,
    /// Environment variable holding the bearer token; unset means no auth header.
    pub api_key_env_var: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// First backoff delay; doubles on each retry.
    pub backoff_ms: u64,
    pub supports_images: bool,
    pub supports_top_k: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint_url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model_id: "mistralai/Mistral-7B-Instruct-v0.2".into(),
            api_key_env_var: "LLM_API_KEY".into(),
            timeout_secs: 120.0,
            max_retries: 3,
            backoff_ms: 500,
            supports_images: false,
            supports_top_k: true,
        }
    }
}

impl BackendConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.max(0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    /// Straight to the backend, nothing stored.
    Live,
    /// Serve hits from the cache, fetch and store misses.
    Record,
    /// Cache only; a miss is an error.
    Replay,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("request timed out")]
    Timeout,
    #[error("authentication failed (HTTP {status})")]
    Auth { status: u16 },
    #[error("malformed server response: {0}")]
    MalformedResponse(String),
    #[error("HTTP {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<LlmError> },
    #[error("replay cache has no record for key {key}")]
    ReplayMiss { key: String },
    #[error("backend {model_id} does not accept images")]
    ImagesUnsupported { model_id: String },
    #[error("cannot read image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cache error at {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} mode needs a cache directory")]
    NoCache(&'static str),
}

impl LlmError {
    fn cache(path: &Path, source: std::io::Error) -> Self {
        LlmError::Cache { path: path.to_path_buf(), source }
    }

    fn is_transient(&self) -> bool {
        match self {
            LlmError::Timeout | LlmError::Transport(_) => true,
            LlmError::HttpStatus { status, .. } => *status == 408 || *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// A file attached to a multimodal request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attachment {
    pub media_type: String,
    pub data: Vec<u8>,
}

impl Attachment {
    pub fn from_path(path: &Path) -> Result<Self, LlmError> {
        let data = std::fs::read(path).map_err(|source| LlmError::Image { path: path.to_path_buf(), source })?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        let media_type = match ext.as_str() {
            "jpg" | "jpeg" => "image/jpeg",
            "gif" => "image/gif",
            "webp" => "image/webp",
            _ => "image/png",
        };
        Ok(Attachment { media_type: media_type.into(), data })
    }

    pub fn data_url(&self) -> String {
        let b64 = base64::engine::general_purpose::STANDARD.encode(&self.data);
        format!("data:{};base64,{b64}", self.media_type)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub cache_key: String,
    pub from_cache: bool,
}

pub struct LlmClient {
    backend: BackendConfig,
    transport: Arc<dyn Transport>,
    cache: Option<ResponseCache>,
    mode: CacheMode,
    warned_top_k: AtomicBool,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("backend", &self.backend)
            .field("mode", &self.mode)
            .field("cache", &self.cache)
            .finish_non_exhaustive()
    }
}

impl LlmClient {
    pub fn new(
        backend: BackendConfig,
        transport: Arc<dyn Transport>,
        mode: CacheMode,
        cache: Option<ResponseCache>,
    ) -> Result<Self, LlmError> {
        match (mode, &cache) {
            (CacheMode::Record, None) => return Err(LlmError::NoCache("record")),
            (CacheMode::Replay, None) => return Err(LlmError::NoCache("replay")),
            _ => {}
        }
        // replay never needs the network
        let transport: Arc<dyn Transport> = if mode == CacheMode::Replay { Arc::new(NoNetwork) } else { transport };
        Ok(LlmClient { backend, transport, cache, mode, warned_top_k: AtomicBool::new(false) })
    }

    /// Live client over real HTTP, optionally recording.
    pub fn http(backend: BackendConfig, mode: CacheMode, cache: Option<ResponseCache>) -> Result<Self, LlmError> {
        LlmClient::new(backend, Arc::new(UreqTransport::default()), mode, cache)
    }

    pub fn replay(backend: BackendConfig, cache: ResponseCache) -> Self {
        LlmClient::new(backend, Arc::new(NoNetwork), CacheMode::Replay, Some(cache)).expect("cache present")
    }

    /// Builds a client whose transport is used even in replay mode, so tests
    /// can observe that it is never touched.
    pub fn with_transport_unchecked(
        backend: BackendConfig,
        transport: Arc<dyn Transport>,
        mode: CacheMode,
        cache: Option<ResponseCache>,
    ) -> Self {
        LlmClient { backend, transport, cache, mode, warned_top_k: AtomicBool::new(false) }
    }

    pub fn backend(&self) -> &BackendConfig {
        &self.backend
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn key_for(&self, messages: &[Message], params: &SamplingParams) -> String {
        cache_key(&self.backend.model_id, params, messages, &[])
    }

    pub fn complete(&self, messages: &[Message], params: &SamplingParams) -> Result<Completion, LlmError> {
        self.run(messages, params, None)
    }

    /// Like [`complete`](Self::complete) with an image on the last user message.
    pub fn complete_multimodal(
        &self,
        messages: &[Message],
        image_path: &Path,
        params: &SamplingParams,
    ) -> Result<Completion, LlmError> {
        if !self.backend.supports_images {
            return Err(LlmError::ImagesUnsupported { model_id: self.backend.model_id.clone() });
        }
        let attachment = Attachment::from_path(image_path)?;
        self.run(messages, params, Some(&attachment))
    }

    fn run(
        &self,
        messages: &[Message],
        params: &SamplingParams,
        image: Option<&Attachment>,
    ) -> Result<Completion, LlmError> {
        let image_at = image.map(|_| messages.iter().rposition(|m| m.role == Role::User).unwrap_or(0));
        let refs: Vec<AttachmentRef> = match (image, image_at) {
            (Some(a), Some(idx)) => vec![AttachmentRef {
                message_index: idx,
                media_type: a.media_type.clone(),
                sha256: sha256_hex(&a.data),
            }],
            _ => Vec::new(),
        };
        let key = cache_key(&self.backend.model_id, params, messages, &refs);

        if self.mode != CacheMode::Live {
            let cache = self.cache.as_ref().expect("checked at construction");
            if let Some(rec) = cache.get(&key)? {
                return Ok(Completion { text: rec.response_text, cache_key: key, from_cache: true });
            }
            if self.mode == CacheMode::Replay {
                return Err(LlmError::ReplayMiss { key });
            }
        }

        let body = self.request_body(messages, params, image.zip(image_at));
        let started = Instant::now();
        let reply = self.send_with_retries(&body)?;
        let latency_ms = started.elapsed().as_millis() as u64;

        if let (CacheMode::Record, Some(cache)) = (self.mode, &self.cache) {
            cache.put(&CompletionRecord {
                cache_key: key.clone(),
                model_id: self.backend.model_id.clone(),
                sampling: params.clone(),
                messages: messages.to_vec(),
                attachments: refs,
                response_text: reply.text.clone(),
                metadata: RecordMetadata {
                    latency_ms: Some(latency_ms),
                    prompt_tokens: reply.prompt_tokens,
                    completion_tokens: reply.completion_tokens,
                    top_k_transmitted: self.backend.supports_top_k,
                },
            })?;
        }
        Ok(Completion { text: reply.text, cache_key: key, from_cache: false })
    }

    fn request_body(
        &self,
        messages: &[Message],
        params: &SamplingParams,
        image: Option<(&Attachment, usize)>,
    ) -> Vec<u8> {
        let msgs: Vec<Value> = messages
            .iter()
            .enumerate()
            .map(|(i, m)| match image {
                Some((a, idx)) if idx == i => json!({
                    "role": m.role.as_str(),
                    "content": [
                        {"type": "text", "text": m.content},
                        {"type": "image_url", "image_url": {"url": a.data_url()}},
                    ],
                }),
                _ => json!({"role": m.role.as_str(), "content": m.content}),
            })
            .collect();
        let mut body = json!({
            "model": self.backend.model_id,
            "messages": msgs,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_output_tokens,
        });
        if self.backend.supports_top_k {
            body["top_k"] = json!(params.top_k);
        } else if !self.warned_top_k.swap(true, Ordering::Relaxed) {
            log::warn!(
                "backend {} does not accept top_k; top_k={} is kept in cache records only",
                self.backend.model_id,
                params.top_k
            );
        }
        serde_json::to_vec(&body).expect("request serializes")
    }

    fn send_with_retries(&self, body: &[u8]) -> Result<Reply, LlmError> {
        let token = std::env::var(&self.backend.api_key_env_var).ok().filter(|t| !t.is_empty());
        let req = HttpRequest {
            url: &self.backend.endpoint_url,
            bearer: token.as_deref(),
            body,
            timeout: self.backend.timeout(),
        };
        let max_attempts = self.backend.max_retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = self.transport.post_json(&req).map_err(|e| match e {
                TransportError::Timeout => LlmError::Timeout,
                TransportError::Connect(msg) => LlmError::Transport(msg),
            });
            let err = match result.and_then(parse_reply) {
                Ok(reply) => return Ok(reply),
                Err(e) => e,
            };
            if !err.is_transient() {
                return Err(err);
            }
            if attempt >= max_attempts {
                return Err(if max_attempts == 1 {
                    err
                } else {
                    LlmError::RetriesExhausted { attempts: attempt, last: Box::new(err) }
                });
            }
            let delay = self.backend.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
            log::debug!("attempt {attempt} failed ({err}); retrying in {delay} ms");
            std::thread::sleep(Duration::from_millis(delay));
        }
    }
}

struct Reply {
    text: String,
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

fn parse_reply(resp: HttpResponse) -> Result<Reply, LlmError> {
    match resp.status {
        200..=299 => {}
        401 | 403 => return Err(LlmError::Auth { status: resp.status }),
        status => return Err(LlmError::HttpStatus { status, body: truncate(&resp.body, 500) }),
    }
    let v: Value =
        serde_json::from_str(&resp.body).map_err(|e| LlmError::MalformedResponse(format!("body is not JSON: {e}")))?;
    let content = &v["choices"][0]["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts.iter().filter_map(|p| p["text"].as_str()).collect::<Vec<_>>().join(""),
        _ => return Err(LlmError::MalformedResponse("no choices[0].message.content".into())),
    };
    Ok(Reply {
        text,
        prompt_tokens: v["usage"]["prompt_tokens"].as_u64(),
        completion_tokens: v["usage"]["completion_tokens"].as_u64(),
    })
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

/// Canned success body in the wire format, for stubs.
pub fn completion_body(text: &str) -> String {
    json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    fn msgs(last: &str) -> Vec<Message> {
        vec![Message::new(Role::System, "sys"), Message::new(Role::User, last)]
    }

    fn counting(status: u16, body: &'static str) -> (Arc<AtomicUsize>, Arc<dyn Transport>) {
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let t = FnTransport(move |_: &HttpRequest<'_>| {
            c.fetch_add(1, Ordering::SeqCst);
            Ok(HttpResponse { status, body: body.to_string() })
        });
        (calls, Arc::new(t))
    }

    fn fast_backend(retries: u32) -> BackendConfig {
        BackendConfig { max_retries: retries, backoff_ms: 0, ..BackendConfig::default() }
    }

    #[test]
    fn key_is_order_and_content_sensitive() {
        let p = SamplingParams::default();
        let a = cache_key("m", &p, &msgs("hello"), &[]);
        assert_eq!(a, cache_key("m", &p, &msgs("hello"), &[]));
        assert_ne!(a, cache_key("m", &p, &msgs("hellp"), &[]));
        let mut swapped = msgs("hello");
        swapped.swap(0, 1);
        assert_ne!(a, cache_key("m", &p, &swapped, &[]));
        assert_ne!(a, cache_key("other", &p, &msgs("hello"), &[]));
        let hotter = SamplingParams { temperature: 0.7, ..p.clone() };
        assert_ne!(a, cache_key("m", &hotter, &msgs("hello"), &[]));
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn retries_are_bounded() {
        let (calls, t) = counting(503, "busy");
        let client = LlmClient::new(fast_backend(2), t, CacheMode::Live, None).unwrap();
        let err = client.complete(&msgs("x"), &SamplingParams::default()).unwrap_err();
        assert!(matches!(err, LlmError::RetriesExhausted { attempts: 3, .. }), "{err}");
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn auth_and_malformed_are_not_retried() {
        let (calls, t) = counting(401, "no");
        let client = LlmClient::new(fast_backend(3), t, CacheMode::Live, None).unwrap();
        assert!(matches!(client.complete(&msgs("x"), &SamplingParams::default()), Err(LlmError::Auth { status: 401 })));
        assert_eq!(calls.load(Ordering::SeqCst), 1);

        let (calls, t) = counting(200, "{\"choices\": []}");
        let client = LlmClient::new(fast_backend(3), t, CacheMode::Live, None).unwrap();
        assert!(matches!(client.complete(&msgs("x"), &SamplingParams::default()), Err(LlmError::MalformedResponse(_))));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn timeout_without_retries_surfaces_directly() {
        let t: Arc<dyn Transport> = Arc::new(FnTransport(|_: &HttpRequest<'_>| Err(TransportError::Timeout)));
        let client = LlmClient::new(fast_backend(0), t, CacheMode::Live, None).unwrap();
        assert!(matches!(client.complete(&msgs("x"), &SamplingParams::default()), Err(LlmError::Timeout)));
    }

    #[test]
    fn request_body_shape() {
        let client = LlmClient::new(BackendConfig::default(), Arc::new(NoNetwork), CacheMode::Live, None).unwrap();
        let body: Value =
            serde_json::from_slice(&client.request_body(&msgs("hi"), &SamplingParams::default(), None)).unwrap();
        assert_eq!(body["temperature"], json!(0.01));
        assert_eq!(body["top_k"], json!(50));
        assert_eq!(body["top_p"], json!(1.0));
        assert_eq!(body["messages"][1], json!({"role": "user", "content": "hi"}));

        let no_top_k = BackendConfig { supports_top_k: false, ..BackendConfig::default() };
        let client = LlmClient::new(no_top_k, Arc::new(NoNetwork), CacheMode::Live, None).unwrap();
        let body: Value =
            serde_json::from_slice(&client.request_body(&msgs("hi"), &SamplingParams::default(), None)).unwrap();
        assert!(body.get("top_k").is_none());

        let img = Attachment { media_type: "image/png".into(), data: vec![1, 2, 3] };
        let body: Value =
            serde_json::from_slice(&client.request_body(&msgs("hi"), &SamplingParams::default(), Some((&img, 1))))
                .unwrap();
        assert_eq!(body["messages"][1]["content"][0]["text"], json!("hi"));
        assert_eq!(body["messages"][1]["content"][1]["image_url"]["url"], json!("data:image/png;base64,AQID"));
    }

    #[test]
    fn replay_and_record_need_a_cache() {
        assert!(matches!(
            LlmClient::new(BackendConfig::default(), Arc::new(NoNetwork), CacheMode::Replay, None),
            Err(LlmError::NoCache("replay"))
        ));
    }

    #[test]
    fn multimodal_checks_capability_first() {
        let (calls, t) = counting(200, "{}");
        let client = LlmClient::new(BackendConfig::default(), t, CacheMode::Live, None).unwrap();
        let err = client
            .complete_multimodal(&msgs("x"), Path::new("/nonexistent.png"), &SamplingParams::default())
            .unwrap_err();
        assert!(matches!(err, LlmError::ImagesUnsupported { .. }));
        assert_eq!(calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn content_parts_are_joined() {
        let r = parse_reply(HttpResponse {
            status: 200,
            body: r#"{"choices":[{"message":{"content":[{"type":"text","text":"a"},{"type":"text","text":"b"}]}}],"usage":{"prompt_tokens":3}}"#.into(),
        })
        .ok()
        .unwrap();
        assert_eq!(r.text, "ab");
        assert_eq!(r.prompt_tokens, Some(3));
    }
}
