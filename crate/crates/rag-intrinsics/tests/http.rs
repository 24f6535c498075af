mod common;

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::MockServer;
use rag_intrinsics::http::{HttpBackend, HttpConfig};
use rag_intrinsics_core::{Backend, BackendError, CompletionRequest, GenerationParams, IntrinsicName};

fn config(url: &str) -> HttpConfig {
    HttpConfig { base_url: url.into(), timeout_secs: 5, ..Default::default() }
}

#[test]
fn request_body_and_model_selection() {
    let server = MockServer::start(|req| format!("echo:{}", req["model"].as_str().unwrap()));
    let mut cfg = config(&server.url);
    cfg.model = "base".into();
    cfg.models.insert(IntrinsicName::Ad, "answerability-lora".into());
    let backend = HttpBackend::new(cfg).unwrap();

    let mut params = GenerationParams::greedy(7);
    params.stop = vec!["<|end_of_text|>".into()];
    params.seed = Some(11);
    let ad = CompletionRequest::new("prompt one", params.clone(), "AD").for_intrinsic(IntrinsicName::Ad);
    let plain = CompletionRequest::new("prompt two", GenerationParams::greedy(3), "generate");
    let out = backend.generate_batch(&[ad, plain]);
    assert_eq!(out[0].as_ref().unwrap().text, "echo:answerability-lora");
    assert_eq!(out[0].as_ref().unwrap().tag, "AD");
    assert_eq!(out[1].as_ref().unwrap().text, "echo:base");

    let mut seen = server.requests.lock().unwrap().clone();
    seen.sort_by_key(|r| r["prompt"].as_str().unwrap().to_string());
    assert_eq!(seen[0]["prompt"], "prompt one");
    assert_eq!(seen[0]["max_tokens"], 7);
    assert_eq!(seen[0]["temperature"], 0.0);
    assert_eq!(seen[0]["stop"], serde_json::json!(["<|end_of_text|>"]));
    assert_eq!(seen[0]["seed"], 11);
    assert_eq!(seen[0]["n"], 1);
    assert!(seen[1].get("stop").is_none());
    assert!(seen[1].get("seed").is_none());
}

#[test]
fn batch_keeps_order_under_concurrency() {
    let server = MockServer::start(|req| req["prompt"].as_str().unwrap().to_uppercase());
    let mut cfg = config(&server.url);
    cfg.concurrency = 4;
    let backend = HttpBackend::new(cfg).unwrap();
    let reqs: Vec<_> =
        (0..20).map(|i| CompletionRequest::new(format!("p{i}"), GenerationParams::greedy(4), format!("t{i}"))).collect();
    let out = backend.generate_batch(&reqs);
    for (i, r) in out.iter().enumerate() {
        assert_eq!(r.as_ref().unwrap().text, format!("P{i}"));
    }
}

/// Serves `handler(connection_index, stream)` for every accepted connection.
fn raw_server(handler: impl Fn(usize, std::net::TcpStream) + Send + Sync + 'static) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let count = Arc::new(AtomicUsize::new(0));
    let seen = count.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let index = seen.fetch_add(1, Ordering::SeqCst);
            handler(index, stream);
        }
    });
    (url, count)
}

fn read_request(stream: &mut std::net::TcpStream) {
    let mut buf = [0u8; 8192];
    let mut data = Vec::new();
    while !data.windows(4).any(|w| w == b"\r\n\r\n") {
        let n = stream.read(&mut buf).unwrap_or(0);
        if n == 0 {
            return;
        }
        data.extend_from_slice(&buf[..n]);
    }
    let head = String::from_utf8_lossy(&data).to_lowercase();
    let header_end = data.windows(4).position(|w| w == b"\r\n\r\n").unwrap() + 4;
    let length: usize = head
        .lines()
        .find_map(|l| l.strip_prefix("content-length:"))
        .map_or(0, |v| v.trim().parse().unwrap_or(0));
    while data.len() < header_end + length {
        let n = stream.read(&mut buf).unwrap_or(0);
        if n == 0 {
            return;
        }
        data.extend_from_slice(&buf[..n]);
    }
}

fn respond(stream: &mut std::net::TcpStream, status: &str, body: &str) {
    let _ = write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
}

#[test]
fn http_error_status_is_not_retried() {
    let (url, count) = raw_server(|_, mut s| {
        read_request(&mut s);
        respond(&mut s, "503 Service Unavailable", "overloaded");
    });
    let backend = HttpBackend::new(config(&url)).unwrap();
    let err = backend.generate(&CompletionRequest::new("p", GenerationParams::greedy(2), "t")).unwrap_err();
    assert!(matches!(&err, BackendError::BackendUnavailable(m) if m.contains("503") && m.contains("overloaded")));
    assert_eq!(count.load(Ordering::SeqCst), 1);
}

#[test]
fn malformed_body_is_invalid_response() {
    let (url, _) = raw_server(|_, mut s| {
        read_request(&mut s);
        respond(&mut s, "200 OK", "{\"choices\": 3}");
    });
    let backend = HttpBackend::new(config(&url)).unwrap();
    let err = backend.generate(&CompletionRequest::new("p", GenerationParams::greedy(2), "t")).unwrap_err();
    assert!(matches!(err, BackendError::InvalidResponse(_)));
}

#[test]
fn dropped_connection_is_retried() {
    let (url, count) = raw_server(|i, mut s| {
        read_request(&mut s);
        if i == 0 {
            drop(s);
        } else {
            respond(&mut s, "200 OK", r#"{"choices": [{"text": "second try", "finish_reason": "length"}]}"#);
        }
    });
    let backend = HttpBackend::new(config(&url)).unwrap();
    let out = backend.generate(&CompletionRequest::new("p", GenerationParams::greedy(2), "t")).unwrap();
    assert_eq!(out.text, "second try");
    assert_eq!(out.finish_reason, rag_intrinsics_core::FinishReason::Length);
    assert_eq!(count.load(Ordering::SeqCst), 2);
}

#[test]
fn unreachable_server_is_backend_error() {
    let mut cfg = config("http://127.0.0.1:9");
    cfg.retries = 0;
    let backend = HttpBackend::new(cfg).unwrap();
    let err = backend.generate(&CompletionRequest::new("p", GenerationParams::greedy(2), "t")).unwrap_err();
    assert!(matches!(err, BackendError::BackendUnavailable(_)));
}
