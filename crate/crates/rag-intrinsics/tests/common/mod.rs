#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

pub fn demo_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/demo")
}

/// Minimal OpenAI-compatible completions server on a random local port.
/// `reply` maps the parsed request body to the completion text.
pub struct MockServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<serde_json::Value>>>,
}

impl MockServer {
    pub fn start(reply: impl Fn(&serde_json::Value) -> String + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = requests.clone();
        let reply = Arc::new(reply);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let log = log.clone();
                let reply = reply.clone();
                std::thread::spawn(move || {
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut length = 0;
                    loop {
                        let mut line = String::new();
                        if reader.read_line(&mut line).unwrap_or(0) == 0 {
                            return;
                        }
                        let line = line.trim_end();
                        if line.is_empty() {
                            break;
                        }
                        if let Some((k, v)) = line.split_once(':') {
                            if k.eq_ignore_ascii_case("content-length") {
                                length = v.trim().parse().unwrap_or(0);
                            }
                        }
                    }
                    let mut body = vec![0; length];
                    reader.read_exact(&mut body).unwrap();
                    let request: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
                    let text = reply(&request);
                    log.lock().unwrap().push(request);
                    let payload = serde_json::json!({
                        "id": "cmpl-test",
                        "object": "text_completion",
                        "choices": [{"index": 0, "text": text, "finish_reason": "stop"}]
                    })
                    .to_string();
                    let response = format!(
                        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                        payload.len(),
                        payload
                    );
                    let _ = stream.write_all(response.as_bytes());
                });
            }
        });
        MockServer { url, requests }
    }
}

/// Model flags that give every intrinsic its own model name, so the mock
/// can tell requests apart.
pub const MODEL_FLAGS: [&str; 18] = [
    "--model", "m-gen", "--model.qr", "m-qr", "--model.qe", "m-qe", "--model.cr", "m-cr", "--model.ad", "m-ad",
    "--model.prr", "m-prr", "--model.uq", "m-uq", "--model.hd", "m-hd", "--model.cg", "m-cg",
];

fn last_user(prompt: &str) -> &str {
    prompt
        .rsplit("<|start_of_role|>user<|end_of_role|>")
        .next()
        .and_then(|r| r.split("<|end_of_text|>").next())
        .unwrap_or_default()
}

/// Well-formed completion for the intrinsic named by the request's model.
pub fn canned_reply(request: &serde_json::Value) -> String {
    let prompt = request["prompt"].as_str().unwrap_or_default();
    match request["model"].as_str().unwrap_or_default() {
        "m-qr" => serde_json::json!({ "rewritten_question": last_user(prompt) }).to_string(),
        "m-cr" => r#"{"context_relevance": "relevant"}"#.into(),
        "m-ad" => "answerable".into(),
        "m-prr" => "A".into(),
        "m-uq" => "85%".into(),
        "m-hd" => {
            let n = (0..).take_while(|i| prompt.contains(&format!("<i{i}>"))).count();
            let verdicts: Vec<_> = (0..n).map(|i| serde_json::json!({"i": i, "f": "faithful", "r": "ok"})).collect();
            serde_json::Value::Array(verdicts).to_string()
        }
        "m-cg" => r#"[{"r": 0, "c": [0]}]"#.into(),
        _ => "A plain answer.".into(),
    }
}
