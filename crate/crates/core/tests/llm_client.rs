mod common;

use std::collections::HashMap;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use adprompt::llm::{
    completion_body, BackendConfig, CacheMode, LlmClient, LlmError, ResponseCache, SamplingParams, UreqTransport,
};
use adprompt::prompt::{Message, Role};

fn backend(url: &str) -> BackendConfig {
    BackendConfig { endpoint_url: url.to_string(), backoff_ms: 1, timeout_secs: 5.0, ..BackendConfig::default() }
}

fn messages(text: &str) -> Vec<Message> {
    vec![Message::new(Role::System, "Answer in JSON."), Message::new(Role::User, text)]
}

fn echo_server() -> common::StubServer {
    common::StubServer::start(|body| (200, completion_body(&common::scripted_reply(body, &HashMap::new()))))
}

#[test]
fn record_then_serve_from_disk() {
    let server = echo_server();
    let dir = tempfile::tempdir().unwrap();
    let params = SamplingParams::default();
    let client =
        LlmClient::http(backend(&server.url), CacheMode::Record, Some(ResponseCache::open(dir.path()).unwrap()))
            .unwrap();

    let first = client.complete(&messages("uh the boy xxx"), &params).unwrap();
    assert!(!first.from_cache);
    assert!(first.text.contains("\"alzheimers_prediction\""));
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);

    let record = dir.path().join("records").join(format!("{}.json", first.cache_key));
    assert!(record.is_file());
    let index = std::fs::read_to_string(dir.path().join("index.tsv")).unwrap();
    assert!(index.starts_with(&first.cache_key));

    let again = client.complete(&messages("uh the boy xxx"), &params).unwrap();
    assert!(again.from_cache);
    assert_eq!(again.text, first.text);
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);

    let replay = LlmClient::replay(backend(&server.url), ResponseCache::open_existing(dir.path()).unwrap());
    let served = replay.complete(&messages("uh the boy xxx"), &params).unwrap();
    assert_eq!(served.text, first.text);
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn replay_miss_names_the_key_and_touches_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(dir.path()).unwrap();
    let (calls, transport) = common::counting_refusal();
    let client =
        LlmClient::with_transport_unchecked(BackendConfig::default(), transport, CacheMode::Replay, Some(cache));
    let params = SamplingParams::default();
    let expected = client.key_for(&messages("never recorded"), &params);
    match client.complete(&messages("never recorded"), &params) {
        Err(LlmError::ReplayMiss { key }) => assert_eq!(key, expected),
        other => panic!("expected a replay miss, got {other:?}"),
    }
    assert_eq!(calls.load(Ordering::SeqCst), 0);
}

#[test]
fn replay_sweep_of_hits_makes_no_calls() {
    let dir = tempfile::tempdir().unwrap();
    let params = SamplingParams::default();
    let (recorded, scripted) = common::scripted_transport(HashMap::new());
    let recorder = LlmClient::new(
        BackendConfig::default(),
        scripted,
        CacheMode::Record,
        Some(ResponseCache::open(dir.path()).unwrap()),
    )
    .unwrap();
    let texts: Vec<String> = (0..12).map(|i| format!("utterance {i} um uh")).collect();
    let live: Vec<String> = texts.iter().map(|t| recorder.complete(&messages(t), &params).unwrap().text).collect();
    assert_eq!(recorded.load(Ordering::SeqCst), 12);

    let (calls, refusal) = common::counting_refusal();
    let replay = LlmClient::with_transport_unchecked(
        BackendConfig::default(),
        refusal,
        CacheMode::Replay,
        Some(ResponseCache::open_existing(dir.path()).unwrap()),
    );
    for (t, want) in texts.iter().zip(&live) {
        let got = replay.complete(&messages(t), &params).unwrap();
        assert!(got.from_cache);
        assert_eq!(&got.text, want);
    }
    assert_eq!(calls.load(Ordering::SeqCst), 0);
}

#[test]
fn server_errors_retry_up_to_the_bound() {
    let server = common::StubServer::start(|_| (503, "{\"error\":\"overloaded\"}".to_string()));
    let cfg = BackendConfig { max_retries: 2, ..backend(&server.url) };
    let client = LlmClient::new(cfg, Arc::new(UreqTransport::default()), CacheMode::Live, None).unwrap();
    let err = client.complete(&messages("x"), &SamplingParams::default()).unwrap_err();
    match err {
        LlmError::RetriesExhausted { attempts, last } => {
            assert_eq!(attempts, 3);
            assert!(matches!(*last, LlmError::HttpStatus { status: 503, .. }), "{last:?}");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(server.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn transient_failure_then_success() {
    let seen = std::sync::atomic::AtomicUsize::new(0);
    let server = common::StubServer::start(move |body| {
        if seen.fetch_add(1, Ordering::SeqCst) == 0 {
            (429, "slow down".to_string())
        } else {
            (200, completion_body(&common::scripted_reply(body, &HashMap::new())))
        }
    });
    let client = LlmClient::http(backend(&server.url), CacheMode::Live, None).unwrap();
    let out = client.complete(&messages("um"), &SamplingParams::default()).unwrap();
    assert!(out.text.contains("probability_score"));
    assert_eq!(server.hits.load(Ordering::SeqCst), 2);
}

#[test]
fn auth_failures_are_not_retried() {
    let server = common::StubServer::start(|_| (401, "{\"error\":\"bad key\"}".to_string()));
    let client = LlmClient::http(backend(&server.url), CacheMode::Live, None).unwrap();
    let err = client.complete(&messages("x"), &SamplingParams::default()).unwrap_err();
    assert!(matches!(err, LlmError::Auth { status: 401 }), "{err:?}");
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn malformed_bodies_are_reported() {
    let server = common::StubServer::start(|_| (200, "{\"choices\":[]}".to_string()));
    let client = LlmClient::http(backend(&server.url), CacheMode::Live, None).unwrap();
    let err = client.complete(&messages("x"), &SamplingParams::default()).unwrap_err();
    assert!(matches!(err, LlmError::MalformedResponse(_)), "{err:?}");
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn request_carries_sampling_and_model() {
    let captured = Arc::new(std::sync::Mutex::new(None::<serde_json::Value>));
    let c = captured.clone();
    let server = common::StubServer::start(move |body| {
        *c.lock().unwrap() = Some(serde_json::from_slice(body).unwrap());
        (200, completion_body("{}"))
    });
    let client = LlmClient::http(backend(&server.url), CacheMode::Live, None).unwrap();
    client.complete(&messages("hello"), &SamplingParams::default()).unwrap();
    let body = captured.lock().unwrap().clone().unwrap();
    assert_eq!(body["model"], "mistralai/Mistral-7B-Instruct-v0.2");
    assert_eq!(body["temperature"], 0.01);
    assert_eq!(body["top_k"], 50);
    assert_eq!(body["max_tokens"], 512);
    assert_eq!(body["messages"][1]["content"], "hello");
}
