//! Deterministic, table-driven backend for tests and offline runs.
//!
//! A script is a JSON document:
//!
//! ```json
//! {
//!   "strict": true,
//!   "rules": [
//!     {"intrinsic": "AD", "response": "answerable"},
//!     {"contains": "certainty", "response": "85%"},
//!     {"regex": "passage A: .*Paris", "response": "A"},
//!     {"tag_prefix": "generate", "sequence": ["first", "second"]}
//!   ]
//! }
//! ```
//!
//! Rules are tried in order; the first whose filters all hold answers.
//! Prompt matchers are `exact`, `contains` and `regex` (at most one per
//! rule). `intrinsic` filters on the calling intrinsic (`GEN` for plain
//! generation) and `tag_prefix` on the request tag. A `sequence` yields its
//! items on successive matches and then repeats the last one.

use std::path::Path;
use std::sync::Mutex;

use rag_intrinsics_core::{Backend, BackendError, CompletionRequest, CompletionResponse, FinishReason, IntrinsicName};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("cannot read script {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("script is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("rule {index}: {reason}")]
    InvalidRule { index: usize, reason: String },
}

/// Serialized form of one rule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag_prefix: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<Vec<String>>,
}

impl RuleSpec {
    pub fn respond(response: impl Into<String>) -> Self {
        RuleSpec { response: Some(response.into()), ..Default::default() }
    }

    pub fn for_intrinsic(mut self, name: &str) -> Self {
        self.intrinsic = Some(name.into());
        self
    }

    pub fn containing(mut self, needle: impl Into<String>) -> Self {
        self.contains = Some(needle.into());
        self
    }
}

fn default_strict() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptSpec {
    /// Unmatched requests fail with `NoScriptMatch` when set; otherwise they
    /// get `fallback`.
    #[serde(default = "default_strict")]
    pub strict: bool,
    #[serde(default)]
    pub fallback: String,
    pub rules: Vec<RuleSpec>,
}

enum PromptMatcher {
    Any,
    Exact(String),
    Contains(String),
    Pattern(Regex),
}

enum IntrinsicFilter {
    Any,
    Generation,
    Named(IntrinsicName),
}

struct Rule {
    prompt: PromptMatcher,
    intrinsic: IntrinsicFilter,
    tag_prefix: Option<String>,
    responses: Vec<String>,
}

impl Rule {
    fn compile(index: usize, spec: &RuleSpec) -> Result<Self, ScriptError> {
        let invalid = |reason: String| ScriptError::InvalidRule { index, reason };
        let prompt = match (&spec.exact, &spec.contains, &spec.regex) {
            (None, None, None) => PromptMatcher::Any,
            (Some(s), None, None) => PromptMatcher::Exact(s.clone()),
            (None, Some(s), None) => PromptMatcher::Contains(s.clone()),
            (None, None, Some(p)) => {
                PromptMatcher::Pattern(Regex::new(p).map_err(|e| invalid(format!("bad regex: {e}")))?)
            }
            _ => return Err(invalid("use at most one of `exact`, `contains`, `regex`".into())),
        };
        let intrinsic = match spec.intrinsic.as_deref() {
            None => IntrinsicFilter::Any,
            Some(s) if s.eq_ignore_ascii_case("gen") => IntrinsicFilter::Generation,
            Some(s) => IntrinsicFilter::Named(s.parse().map_err(|e| invalid(format!("{e}")))?),
        };
        let responses = match (&spec.response, &spec.sequence) {
            (Some(r), None) => vec![r.clone()],
            (None, Some(seq)) if !seq.is_empty() => seq.clone(),
            (None, Some(_)) => return Err(invalid("`sequence` is empty".into())),
            _ => return Err(invalid("give exactly one of `response`, `sequence`".into())),
        };
        Ok(Rule { prompt, intrinsic, tag_prefix: spec.tag_prefix.clone(), responses })
    }

    fn matches(&self, req: &CompletionRequest) -> bool {
        let prompt_ok = match &self.prompt {
            PromptMatcher::Any => true,
            PromptMatcher::Exact(s) => req.prompt == *s,
            PromptMatcher::Contains(s) => req.prompt.contains(s.as_str()),
            PromptMatcher::Pattern(re) => re.is_match(&req.prompt),
        };
        let intrinsic_ok = match self.intrinsic {
            IntrinsicFilter::Any => true,
            IntrinsicFilter::Generation => req.intrinsic.is_none(),
            IntrinsicFilter::Named(name) => req.intrinsic == Some(name),
        };
        let tag_ok = self.tag_prefix.as_deref().is_none_or(|p| req.tag.starts_with(p));
        prompt_ok && intrinsic_ok && tag_ok
    }
}

pub struct ScriptedBackend {
    rules: Vec<Rule>,
    strict: bool,
    fallback: String,
    /// Matches served so far, per rule.
    hits: Mutex<Vec<usize>>,
}

impl ScriptedBackend {
    pub fn new(spec: &ScriptSpec) -> Result<Self, ScriptError> {
        let rules = spec.rules.iter().enumerate().map(|(i, r)| Rule::compile(i, r)).collect::<Result<Vec<_>, _>>()?;
        Ok(ScriptedBackend {
            hits: Mutex::new(vec![0; rules.len()]),
            rules,
            strict: spec.strict,
            fallback: spec.fallback.clone(),
        })
    }

    pub fn from_rules(rules: Vec<RuleSpec>) -> Result<Self, ScriptError> {
        Self::new(&ScriptSpec { strict: true, fallback: String::new(), rules })
    }

    pub fn from_json(text: &str) -> Result<Self, ScriptError> {
        Self::new(&serde_json::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScriptError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn rule_count(&self) -> usize {
        self.rules.len()
    }

    /// Matches served per rule, in rule order.
    pub fn hits(&self) -> Vec<usize> {
        self.hits.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl Backend for ScriptedBackend {
    fn generate(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        req.validate()?;
        let Some(index) = self.rules.iter().position(|r| r.matches(req)) else {
            if self.strict {
                return Err(BackendError::NoScriptMatch { tag: req.tag.clone() });
            }
            return Ok(CompletionResponse { text: self.fallback.clone(), finish_reason: FinishReason::Stop, tag: req.tag.clone() });
        };
        let responses = &self.rules[index].responses;
        let call = {
            let mut hits = self.hits.lock().unwrap_or_else(|e| e.into_inner());
            hits[index] += 1;
            hits[index] - 1
        };
        let text = responses[call.min(responses.len() - 1)].clone();
        Ok(CompletionResponse { text, finish_reason: FinishReason::Stop, tag: req.tag.clone() })
    }
}
