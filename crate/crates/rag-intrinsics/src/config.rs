//! Run configuration: TOML file, then `RAG_INTRINSICS_*` environment
//! variables, then command-line flags, each overriding the previous.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rag_intrinsics_core::pipeline::{FlowKind, DEFAULT_FLOW_K};
use rag_intrinsics_core::IntrinsicName;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::HttpConfig;

pub const ENV_PREFIX: &str = "RAG_INTRINSICS_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid value for {key}: {reason}")]
    InvalidValue { key: String, reason: String },
    #[error("configure exactly one backend: a server URL or a scripted file")]
    BackendMode,
}

/// File layout. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub backend: BackendSection,
    pub flow: FlowSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub url: Option<String>,
    pub scripted: Option<PathBuf>,
    pub model: Option<String>,
    pub models: BTreeMap<IntrinsicName, String>,
    pub timeout_secs: Option<u64>,
    pub concurrency: Option<usize>,
    pub retries: Option<u32>,
    pub api_key: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub kind: Option<FlowKind>,
    pub k: Option<usize>,
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Applies `RAG_INTRINSICS_*` overrides read through `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let get = |key: &str| var(&format!("{ENV_PREFIX}{key}")).filter(|v| !v.is_empty());
        let b = &mut self.backend;
        if let Some(v) = get("BACKEND_URL") {
            b.url = Some(v);
        }
        if let Some(v) = get("SCRIPTED") {
            b.scripted = Some(v.into());
        }
        if let Some(v) = get("MODEL") {
            b.model = Some(v);
        }
        for name in IntrinsicName::ALL {
            if let Some(v) = get(&format!("MODEL_{}", name.as_str())) {
                b.models.insert(name, v);
            }
        }
        if let Some(v) = get("TIMEOUT_SECS") {
            b.timeout_secs = Some(parse_value("TIMEOUT_SECS", &v)?);
        }
        if let Some(v) = get("CONCURRENCY") {
            b.concurrency = Some(parse_value("CONCURRENCY", &v)?);
        }
        if let Some(v) = get("RETRIES") {
            b.retries = Some(parse_value("RETRIES", &v)?);
        }
        if let Some(v) = get("API_KEY") {
            b.api_key = Some(v);
        }
        let f = &mut self.flow;
        if let Some(v) = get("FLOW") {
            f.kind = Some(parse_value("FLOW", &v)?);
        }
        if let Some(v) = get("K") {
            f.k = Some(parse_value("K", &v)?);
        }
        if let Some(v) = get("JOBS") {
            f.jobs = Some(parse_value("JOBS", &v)?);
        }
        if let Some(v) = get("SEED") {
            f.seed = Some(parse_value("SEED", &v)?);
        }
        Ok(())
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue { key: format!("{ENV_PREFIX}{key}"), reason: e.to_string() })
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendMode {
    Http(HttpConfig),
    Scripted(PathBuf),
}

/// Resolved settings for one CLI run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backend: BackendMode,
    pub flow: FlowKind,
    pub k: usize,
    pub jobs: usize,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn resolve(file: &ConfigFile) -> Result<Self, ConfigError> {
        let b = &file.backend;
        let backend = match (&b.url, &b.scripted) {
            (Some(url), None) => {
                let mut http = HttpConfig { base_url: url.clone(), models: b.models.clone(), ..Default::default() };
                if let Some(m) = &b.model {
                    http.model = m.clone();
                }
                http.timeout_secs = b.timeout_secs.unwrap_or(http.timeout_secs);
                http.concurrency = b.concurrency.unwrap_or(http.concurrency);
                http.retries = b.retries.unwrap_or(http.retries);
                http.api_key = b.api_key.clone();
                if http.concurrency == 0 {
                    return Err(ConfigError::InvalidValue { key: "concurrency".into(), reason: "must be at least 1".into() });
                }
                BackendMode::Http(http)
            }
            (None, Some(path)) => BackendMode::Scripted(path.clone()),
            _ => return Err(ConfigError::BackendMode),
        };
        let k = file.flow.k.unwrap_or(DEFAULT_FLOW_K);
        if k == 0 {
            return Err(ConfigError::InvalidValue { key: "k".into(), reason: "must be at least 1".into() });
        }
        Ok(RunConfig {
            backend,
            flow: file.flow.kind.unwrap_or(FlowKind::None),
            k,
            jobs: file.flow.jobs.unwrap_or(1).max(1),
            seed: file.flow.seed,
        })
    }
}
