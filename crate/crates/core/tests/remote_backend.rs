use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use facetforge::gateway::{
    CacheStore, CachingBackend, ChatMessage, GatewayError, Llm, LlmBackend, Purpose, RemoteBackend, RemoteConfig,
    RetryPolicy,
};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    authorization: Option<String>,
    body: Value,
}

/// Minimal HTTP/1.1 server answering one queued response per connection.
struct Stub {
    base_url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
    handle: Option<JoinHandle<()>>,
}

impl Stub {
    fn start(responses: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        let handle = std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
                let mut len = 0usize;
                let mut authorization = None;
                loop {
                    let mut h = String::new();
                    reader.read_line(&mut h).unwrap();
                    let h = h.trim_end();
                    if h.is_empty() {
                        break;
                    }
                    let (name, value) = h.split_once(':').unwrap();
                    match name.to_ascii_lowercase().as_str() {
                        "content-length" => len = value.trim().parse().unwrap(),
                        "authorization" => authorization = Some(value.trim().to_string()),
                        _ => {}
                    }
                }
                let mut raw = vec![0u8; len];
                reader.read_exact(&mut raw).unwrap();
                log.lock().unwrap().push(Seen {
                    path,
                    authorization,
                    body: serde_json::from_slice(&raw).unwrap_or(Value::Null),
                });
                let mut stream = stream;
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
                stream.flush().unwrap();
            }
        });
        Self { base_url, seen, handle: Some(handle) }
    }

    fn seen(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }

    fn join(mut self) -> Vec<Seen> {
        self.handle.take().unwrap().join().unwrap();
        self.seen()
    }
}

fn completion(text: &str) -> String {
    json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 3}
    })
    .to_string()
}

fn backend(stub: &Stub, attempts: u32) -> RemoteBackend {
    let mut cfg = RemoteConfig::new(stub.base_url.clone());
    cfg.api_key = Some("sk-test".into());
    cfg.timeout = Duration::from_secs(10);
    cfg.retry = RetryPolicy { max_attempts: attempts, base_delay: Duration::ZERO };
    RemoteBackend::new(cfg)
}

fn ask(llm: &Llm, q: &str) -> Result<String, GatewayError> {
    llm.chat(Purpose::Solver, vec![ChatMessage::system("Be brief."), ChatMessage::user(q)]).map(|r| r.text)
}

#[test]
fn chat_request_shape_and_usage() {
    let stub = Stub::start(vec![(200, completion("Answer: B"))]);
    let remote = backend(&stub, 1);
    let llm = Llm::standalone(remote, "gpt-test");
    let resp = llm.chat(Purpose::Solver, vec![ChatMessage::user("2+2?")]).unwrap();
    assert_eq!((resp.text.as_str(), resp.prompt_tokens, resp.completion_tokens), ("Answer: B", 11, 3));
    let seen = stub.join();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer sk-test"));
    assert_eq!(seen[0].body["model"], "gpt-test");
    assert_eq!(seen[0].body["temperature"], 0.0);
    assert_eq!(seen[0].body["messages"][0], json!({"role": "user", "content": "2+2?"}));
}

#[test]
fn retries_transient_failures() {
    let stub = Stub::start(vec![(503, "{}".into()), (429, "{}".into()), (200, completion("ok"))]);
    let llm = Llm::standalone(backend(&stub, 5), "m");
    assert_eq!(ask(&llm, "q").unwrap(), "ok");
    assert_eq!(llm.backend().network_requests(), 3);
    assert_eq!(llm.ledger().snapshot().total(), 1);
    assert_eq!(stub.join().len(), 3);
}

#[test]
fn gives_up_after_max_attempts() {
    let stub = Stub::start(vec![(500, "down".into()), (500, "down".into())]);
    let llm = Llm::standalone(backend(&stub, 2), "m");
    match ask(&llm, "q") {
        Err(GatewayError::Remote { status: 500, body }) => assert_eq!(body, "down"),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(llm.ledger().snapshot().total(), 0);
    assert_eq!(stub.join().len(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let stub = Stub::start(vec![(400, "bad".into()), (200, completion("never"))]);
    let llm = Llm::standalone(backend(&stub, 5), "m");
    assert!(matches!(ask(&llm, "q"), Err(GatewayError::Remote { status: 400, .. })));
    assert_eq!(stub.seen().len(), 1);
    assert_eq!(llm.backend().network_requests(), 1);
}

#[test]
fn embeddings_are_ordered_and_normalized() {
    let body = json!({"data": [
        {"index": 1, "embedding": [0.0, 2.0]},
        {"index": 0, "embedding": [3.0, 4.0]}
    ]})
    .to_string();
    let stub = Stub::start(vec![(200, body)]);
    let llm = Llm::standalone(backend(&stub, 1), "embed-model");
    let v = llm.embed(&["a".to_string(), "b".to_string()]).unwrap();
    assert!((v[0][0] - 0.6).abs() < 1e-12 && (v[0][1] - 0.8).abs() < 1e-12);
    assert_eq!(v[1], vec![0.0, 1.0]);
    let seen = stub.join();
    assert_eq!(seen[0].path, "/v1/embeddings");
    assert_eq!(seen[0].body, json!({"model": "embed-model", "input": ["a", "b"]}));
}

#[test]
fn ledger_matches_requests_seen_by_server() {
    let stub = Stub::start((0..4).map(|i| (200, completion(&format!("r{i}")))).collect());
    let store = Arc::new(CacheStore::in_memory());
    let llm = Llm::standalone(CachingBackend::new(backend(&stub, 1), store), "m");
    for q in ["a", "b", "a", "c", "b", "d"] {
        ask(&llm, q).unwrap();
    }
    // repeated questions are served from the cache
    assert_eq!(ask(&llm, "a").unwrap(), "r0");
    let seen = stub.join();
    assert_eq!(seen.len(), 4);
    assert_eq!(llm.ledger().snapshot().total(), 4);
    assert_eq!(llm.backend().network_requests(), 4);
}

#[test]
fn offline_cache_never_reaches_the_server() {
    let stub = Stub::start(vec![(200, completion("unused"))]);
    let store = Arc::new(CacheStore::in_memory());
    let llm = Llm::standalone(CachingBackend::new(backend(&stub, 1), store).offline(true), "m");
    assert!(matches!(ask(&llm, "q"), Err(GatewayError::Offline(_))));
    assert_eq!(llm.backend().network_requests(), 0);
    assert!(stub.seen().is_empty());
}
