#![allow(dead_code)]

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use adprompt::chat::{build_transcript, parse_chat, transcripts_to_jsonl, Transcript};
use adprompt::harness::SweepConfig;
use adprompt::llm::{completion_body, FnTransport, HttpRequest, HttpResponse, Transport};
use adprompt::manifest::{Manifest, Split};
use adprompt::pool::{make_proxy_pool, ExemplarPool};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn manifest() -> Manifest {
    Manifest::load(fixtures().join("manifest.jsonl")).unwrap()
}

pub fn chat_files() -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = std::fs::read_dir(fixtures().join("chat"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "cha"))
        .map(|p| (p.file_stem().unwrap().to_str().unwrap().to_string(), std::fs::read_to_string(&p).unwrap()))
        .collect();
    out.sort();
    out
}

pub fn transcripts() -> Vec<Transcript> {
    let m = manifest();
    chat_files().iter().map(|(id, text)| build_transcript(&parse_chat(text, id).unwrap(), &m).unwrap()).collect()
}

pub fn proxy_pool() -> ExemplarPool {
    make_proxy_pool(&transcripts()).unwrap().pool
}

pub fn test_transcripts() -> Vec<Transcript> {
    transcripts().into_iter().filter(|t| t.split == Split::Test).collect()
}

/// Disfluency cue count used by the scripted model.
pub fn cue_count(text: &str) -> usize {
    text.split_whitespace().filter(|w| matches!(*w, "uh" | "um" | "xxx" | "pause)")).count()
}

/// Deterministic stand-in for a model: scores the test transcript by its
/// disfluency cues, nudged by prompt length so k matters. `overrides` maps a
/// test transcript (matched as a substring of the final message) to a fixed
/// raw reply.
pub fn scripted_reply(body: &[u8], overrides: &HashMap<String, String>) -> String {
    let v: serde_json::Value = serde_json::from_slice(body).unwrap();
    let msgs = v["messages"].as_array().unwrap();
    let test = msgs.last().unwrap()["content"].as_str().unwrap();
    if let Some((_, reply)) = overrides.iter().find(|(t, _)| test.contains(t.as_str())) {
        return reply.clone();
    }
    let k = (msgs.len() - 2) / 4;
    let p = (0.15 + 0.11 * cue_count(test) as f64 + 0.004 * k as f64).min(0.97);
    let p = (p * 1000.0).round() / 1000.0;
    let pred = if p > 0.5 { "YES" } else { "NO" };
    format!(r#"{{"comment":"scored on cues","alzheimers_prediction":"{pred}","probability_score":{p}}}"#)
}

pub fn scripted_transport(overrides: HashMap<String, String>) -> (Arc<AtomicUsize>, Arc<dyn Transport>) {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let t = FnTransport(move |req: &HttpRequest<'_>| {
        c.fetch_add(1, Ordering::SeqCst);
        Ok(HttpResponse { status: 200, body: completion_body(&scripted_reply(req.body, &overrides)) })
    });
    (calls, Arc::new(t))
}

/// Transport that counts calls and always fails.
pub fn counting_refusal() -> (Arc<AtomicUsize>, Arc<dyn Transport>) {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let t = FnTransport(move |_: &HttpRequest<'_>| {
        c.fetch_add(1, Ordering::SeqCst);
        Err(adprompt::llm::TransportError::Connect("instrumented transport".into()))
    });
    (calls, Arc::new(t))
}

/// A temporary experiment directory with normalized data, a proxy pool and
/// a config file.
pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new(extra_config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("data")).unwrap();
        std::fs::copy(fixtures().join("manifest.jsonl"), root.join("data/manifest.jsonl")).unwrap();
        std::fs::write(root.join("data/transcripts.jsonl"), transcripts_to_jsonl(&transcripts())).unwrap();
        std::fs::write(root.join("proxy.jsonl"), proxy_pool().to_jsonl()).unwrap();
        let config = format!(
            "data_dir = \"data\"\nmanifest = \"data/manifest.jsonl\"\nproxy_pool = \"proxy.jsonl\"\noutput_dir = \"out\"\n{extra_config}\n"
        );
        std::fs::write(root.join("sweep.toml"), config).unwrap();
        Workspace { dir }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn config_path(&self) -> PathBuf {
        self.path().join("sweep.toml")
    }

    pub fn config(&self) -> SweepConfig {
        SweepConfig::load(&self.config_path()).unwrap()
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.path().join("cache")
    }
}

/// Minimal HTTP/1.1 server answering each POST via `reply(body) -> (status, body)`.
pub struct StubServer {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
}

impl StubServer {
    pub fn start<F>(reply: F) -> Self
    where
        F: Fn(&[u8]) -> (u16, String) + Send + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let h = hits.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body = vec![0u8; len];
                if reader.read_exact(&mut body).is_err() {
                    continue;
                }
                h.fetch_add(1, Ordering::SeqCst);
                let (status, text) = reply(&body);
                let resp = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                    text.len()
                );
                let _ = stream.write_all(resp.as_bytes());
            }
        });
        StubServer { url: format!("http://{addr}/v1/chat/completions"), hits }
    }
}
