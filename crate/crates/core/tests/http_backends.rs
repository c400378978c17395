//! HTTP backends against a local canned-response server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use ndarray::Array2;
use serde_json::{json, Value};

use excae::embedder::{RemoteEmbedder, TextEmbedder};
use excae::gateway::{
    generate_captions, refine_prompt, BackendChain, CaptionReply, CaptionRule, HttpChatBackend, HttpChatConfig,
    LlmBackend, MockScript, Prompt, ScriptedMock,
};
use excae::model::{TextRecord, VideoRecord};
use excae::Error;

#[derive(Debug, Clone)]
struct Seen {
    auth: Option<String>,
    body: Value,
}

/// Serves `replies` in order, one connection each, and records requests.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                auth,
                body: serde_json::from_slice(&buf).unwrap_or(Value::Null),
            });
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn chat_reply(content: &str) -> (u16, String) {
    (200, json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string())
}

fn config(url: &str) -> HttpChatConfig {
    HttpChatConfig {
        backoff_ms: 1,
        timeout_secs: 10,
        ..HttpChatConfig::new(url, "test-model")
    }
}

fn video() -> VideoRecord {
    VideoRecord {
        id: "v1".into(),
        frames: Array2::zeros((1, 4)),
        source_ref: Some("https://example.org/v1.jpg".into()),
        description: Some("a dog runs on the beach".into()),
    }
}

#[test]
fn captions_are_parsed_and_token_is_sent() {
    let (url, seen) = serve(vec![chat_reply("1. a dog runs\n2. the beach at noon\n3. waves behind a dog")]);
    let backend = HttpChatBackend::with_token(config(&url), Some("secret".into()));
    let reply = backend.caption(&video(), &Prompt::initial(), 3).unwrap();
    assert_eq!(
        reply,
        CaptionReply::Captions(vec!["a dog runs".into(), "the beach at noon".into(), "waves behind a dog".into()])
    );
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer secret"));
    assert_eq!(seen[0].body["model"], "test-model");
    let messages = seen[0].body["messages"].as_array().unwrap();
    let parts = messages.last().unwrap()["content"].as_array().unwrap();
    assert!(parts.iter().any(|p| p["image_url"]["url"] == "https://example.org/v1.jpg"));
}

#[test]
fn server_errors_are_retried() {
    let (url, seen) = serve(vec![(503, "{}".into()), (429, "{}".into()), chat_reply("A new prompt.")]);
    let backend = HttpChatBackend::with_token(config(&url), None);
    let v = video();
    let t = TextRecord::new("v1", "a dog runs", 70);
    let p = refine_prompt(&Prompt::initial(), &[(&v, &t)], &backend).unwrap();
    assert_eq!(p.text, "A new prompt.");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_fail_without_retry() {
    let (url, seen) = serve(vec![(400, "{\"error\":\"bad request\"}".into())]);
    let backend = HttpChatBackend::with_token(config(&url), None);
    let err = backend.caption(&video(), &Prompt::initial(), 2).unwrap_err();
    assert!(matches!(err, Error::Backend { attempts: 1, .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn refusal_falls_back_to_next_backend() {
    let (url, _) = serve(vec![chat_reply("I'm sorry, I can't help with that.")]);
    let primary: Arc<dyn LlmBackend> = Arc::new(HttpChatBackend::with_token(config(&url), None));
    let script = MockScript {
        captions: vec![CaptionRule::lines("v1", None, &["a dog", "a beach"])],
        ..Default::default()
    };
    let fallback: Arc<dyn LlmBackend> = Arc::new(ScriptedMock::new(script));
    let chain = BackendChain::new(vec![primary, fallback]).unwrap();
    let g = generate_captions(&video(), &Prompt::initial(), 2, &chain).unwrap();
    assert!(g.provenance.fallback);
    assert_eq!(g.provenance.attempts.len(), 2);
    assert!(g.provenance.attempts[0].outcome.starts_with("refused"));
    assert_eq!(g.set.captions, vec!["a dog", "a beach"]);
}

fn embedder(url: &str, dim: usize) -> RemoteEmbedder {
    RemoteEmbedder::new(url.into(), "embed-model".into(), dim, Some("tok".into()), 2, Duration::from_secs(10))
        .with_backoff(Duration::from_millis(1))
}

#[test]
fn embeddings_are_reordered_and_normalized() {
    let body = json!({"data": [
        {"index": 1, "embedding": [0.0, 2.0]},
        {"index": 0, "embedding": [3.0, 4.0]},
    ]});
    let (url, seen) = serve(vec![(500, "{}".into()), (200, body.to_string())]);
    let out = embedder(&url, 2).embed_batch(&["first", "second"]).unwrap();
    assert_eq!(out[0].values(), &[0.6, 0.8]);
    assert_eq!(out[1].values(), &[0.0, 1.0]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[1].body["input"], json!(["first", "second"]));
    assert_eq!(seen[1].auth.as_deref(), Some("Bearer tok"));
}

#[test]
fn embedding_dimension_mismatch_is_reported() {
    let body = json!({"data": [{"index": 0, "embedding": [1.0, 0.0, 0.0]}]}).to_string();
    let (url, _) = serve(vec![(200, body.clone()), (200, body.clone()), (200, body)]);
    let err = embedder(&url, 2).embed_text("x").unwrap_err();
    assert!(err.to_string().contains("does not match configured 2"), "{err}");
}
