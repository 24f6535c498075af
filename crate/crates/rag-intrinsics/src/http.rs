//! Client for OpenAI-compatible `/v1/completions` servers.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rag_intrinsics_core::{Backend, BackendError, CompletionRequest, CompletionResponse, FinishReason, IntrinsicName};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpConfig {
    pub base_url: String,
    /// Model used when no per-intrinsic name is set.
    pub model: String,
    /// Per-intrinsic model names, keyed by intrinsic (`QR`, `AD`, ...).
    pub models: BTreeMap<IntrinsicName, String>,
    pub timeout_secs: u64,
    pub concurrency: usize,
    pub retries: u32,
    pub api_key: Option<String>,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "http://localhost:8000".into(),
            model: "default".into(),
            models: BTreeMap::new(),
            timeout_secs: 60,
            concurrency: 8,
            retries: 2,
            api_key: None,
        }
    }
}

impl HttpConfig {
    pub fn model_for(&self, intrinsic: Option<IntrinsicName>) -> &str {
        intrinsic.and_then(|i| self.models.get(&i)).map_or(self.model.as_str(), String::as_str)
    }
}

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    stop: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    n: u32,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    endpoint: String,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| BackendError::BackendUnavailable(e.to_string()))?;
        let endpoint = format!("{}/v1/completions", config.base_url.trim_end_matches('/'));
        Ok(HttpBackend { config, client, endpoint })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn send_once(&self, body: &WireRequest<'_>) -> Result<reqwest::blocking::Response, reqwest::Error> {
        let mut builder = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        builder.send()
    }
}

fn is_transport(e: &reqwest::Error) -> bool {
    e.is_connect() || e.is_timeout() || e.is_request()
}

fn transport_error(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else {
        BackendError::BackendUnavailable(e.to_string())
    }
}

impl Backend for HttpBackend {
    fn generate(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        req.validate()?;
        let body = WireRequest {
            model: self.config.model_for(req.intrinsic),
            prompt: &req.prompt,
            max_tokens: req.params.max_tokens,
            temperature: req.params.temperature,
            stop: &req.params.stop,
            seed: req.params.seed,
            n: req.params.n_samples,
        };
        let mut attempt = 0;
        let response = loop {
            match self.send_once(&body) {
                Ok(r) => break r,
                Err(e) if is_transport(&e) && attempt < self.config.retries => attempt += 1,
                Err(e) => return Err(transport_error(e)),
            }
        };
        let status = response.status();
        let text = response.text().map_err(transport_error)?;
        if !status.is_success() {
            let snippet: String = text.chars().take(200).collect();
            return Err(BackendError::BackendUnavailable(format!("HTTP {status}: {snippet}")));
        }
        let parsed: WireResponse =
            serde_json::from_str(&text).map_err(|e| BackendError::InvalidResponse(format!("{e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::InvalidResponse("response has no choices".into()))?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            Some("stop") | None => FinishReason::Stop,
            Some(_) => FinishReason::Error,
        };
        Ok(CompletionResponse { text: choice.text, finish_reason, tag: req.tag.clone() })
    }

    /// Runs up to `concurrency` requests at a time; results keep request order.
    fn generate_batch(&self, reqs: &[CompletionRequest]) -> Vec<Result<CompletionResponse, BackendError>> {
        run_bounded(reqs, self.config.concurrency, |r| self.generate(r))
    }
}

/// Maps `work` over `items` on at most `cap` scoped threads, keeping order.
pub fn run_bounded<T: Sync, R: Send>(items: &[T], cap: usize, work: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = cap.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(work).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let out = work(item);
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every slot is filled"))
        .collect()
}
