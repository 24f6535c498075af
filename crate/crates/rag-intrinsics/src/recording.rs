//! Backend wrapper that keeps every prompt/completion pair for audit.

use std::sync::Mutex;

use rag_intrinsics_core::{Backend, BackendError, CompletionRequest, CompletionResponse, IntrinsicName};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub tag: String,
    pub intrinsic: Option<IntrinsicName>,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct Recording<B> {
    inner: B,
    log: Mutex<Vec<Exchange>>,
}

impl<B> Recording<B> {
    pub fn new(inner: B) -> Self {
        Recording { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn exchanges(&self) -> Vec<Exchange> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn record(&self, req: &CompletionRequest, result: &Result<CompletionResponse, BackendError>) {
        let (completion, error) = match result {
            Ok(r) => (Some(r.text.clone()), None),
            Err(e) => (None, Some(e.to_string())),
        };
        self.log.lock().unwrap_or_else(|e| e.into_inner()).push(Exchange {
            tag: req.tag.clone(),
            intrinsic: req.intrinsic,
            prompt: req.prompt.clone(),
            completion,
            error,
        });
    }
}

impl<B: Backend> Backend for Recording<B> {
    fn generate(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let result = self.inner.generate(req);
        self.record(req, &result);
        result
    }

    fn generate_batch(&self, reqs: &[CompletionRequest]) -> Vec<Result<CompletionResponse, BackendError>> {
        let results = self.inner.generate_batch(reqs);
        for (req, result) in reqs.iter().zip(&results) {
            self.record(req, result);
        }
        results
    }
}
