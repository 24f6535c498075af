//! The inference contract every intrinsic runs through.
//!
//! Implementations live elsewhere: the companion crate provides a scripted
//! backend for tests and a client for OpenAI-compatible completion servers.
//! [`FnBackend`] adapts a closure, which is handy for judges that need to
//! look at the prompt.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::IntrinsicName;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("request timed out")]
    Timeout,
    #[error("no scripted response matches request `{tag}`")]
    NoScriptMatch { tag: String },
    #[error("invalid server response: {0}")]
    InvalidResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default)]
    pub stop: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "one")]
    pub n_samples: u32,
}

fn one() -> u32 {
    1
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams { max_tokens: 256, temperature: 0.0, stop: Vec::new(), seed: None, n_samples: 1 }
    }
}

impl GenerationParams {
    pub fn greedy(max_tokens: u32) -> Self {
        GenerationParams { max_tokens, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be non-negative".into()));
        }
        if self.n_samples == 0 {
            return Err(BackendError::InvalidRequest("n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub params: GenerationParams,
    /// Correlation id, echoed in the response.
    pub tag: String,
    /// The intrinsic this call serves; `None` for plain generation. Network
    /// backends use it to pick a per-intrinsic model name.
    #[serde(default)]
    pub intrinsic: Option<IntrinsicName>,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, params: GenerationParams, tag: impl Into<String>) -> Self {
        CompletionRequest { prompt: prompt.into(), params, tag: tag.into(), intrinsic: None }
    }

    pub fn for_intrinsic(mut self, intrinsic: IntrinsicName) -> Self {
        self.intrinsic = Some(intrinsic);
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.prompt.is_empty() {
            return Err(BackendError::InvalidRequest("prompt is empty".into()));
        }
        self.params.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub tag: String,
}

pub trait Backend {
    fn generate(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError>;

    /// Runs every request and returns one result per request, in request
    /// order. A failing item does not abort the others.
    ///
    /// The default runs sequentially; implementations may run items
    /// concurrently as long as the order is kept.
    fn generate_batch(&self, reqs: &[CompletionRequest]) -> Vec<Result<CompletionResponse, BackendError>> {
        reqs.iter().map(|req| self.generate(req)).collect()
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn generate(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        (**self).generate(req)
    }

    fn generate_batch(&self, reqs: &[CompletionRequest]) -> Vec<Result<CompletionResponse, BackendError>> {
        (**self).generate_batch(reqs)
    }
}

impl<B: Backend + ?Sized> Backend for alloc::boxed::Box<B> {
    fn generate(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        (**self).generate(req)
    }

    fn generate_batch(&self, reqs: &[CompletionRequest]) -> Vec<Result<CompletionResponse, BackendError>> {
        (**self).generate_batch(reqs)
    }
}

/// A backend computed by a closure from the request.
pub struct FnBackend<F>(pub F);

impl<F> Backend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<String, BackendError>,
{
    fn generate(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        req.validate()?;
        let text = (self.0)(req)?;
        Ok(CompletionResponse { text, finish_reason: FinishReason::Stop, tag: req.tag.clone() })
    }
}
