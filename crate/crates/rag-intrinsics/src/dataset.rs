//! Line-delimited JSON dataset and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rag_intrinsics_core::parsing::AnswerabilityLabel;
use rag_intrinsics_core::pipeline::{FlowKind, FlowResult};
use rag_intrinsics_core::{Conversation, Document};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Record { path: String, line: usize, reason: String },
    #[error("{path}: duplicate id `{id}`")]
    DuplicateId { path: String, id: String },
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let shown = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io { path: shown.clone(), source })?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io { path: shown.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line)
            .map_err(|e| DatasetError::Record { path: shown.clone(), line: i + 1, reason: e.to_string() })?;
        out.push(value);
    }
    Ok(out)
}

/// Writes one compact JSON value per line.
pub fn write_jsonl<T: Serialize>(mut out: impl Write, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

fn check_unique<'a>(path: &Path, ids: impl Iterator<Item = &'a str>) -> Result<(), DatasetError> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(DatasetError::DuplicateId { path: path.display().to_string(), id: id.into() });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub id: String,
    pub turns: Conversation,
}

pub fn read_conversations(path: &Path) -> Result<Vec<ConversationRecord>, DatasetError> {
    let records: Vec<ConversationRecord> = read_jsonl(path)?;
    check_unique(path, records.iter().map(|r| r.id.as_str()))?;
    Ok(records)
}

/// Corpus documents; every line needs a `doc_id`.
pub fn read_corpus(path: &Path) -> Result<Vec<Document>, DatasetError> {
    let docs: Vec<Document> = read_jsonl(path)?;
    if let Some(i) = docs.iter().position(|d| d.doc_id.is_empty()) {
        return Err(DatasetError::Record { path: path.display().to_string(), line: i + 1, reason: "missing `doc_id`".into() });
    }
    check_unique(path, docs.iter().map(|d| d.doc_id.as_str()))?;
    Ok(docs)
}

/// Ground truth for one conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_doc_ids: Option<Vec<String>>,
    pub answerable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_answer: Option<String>,
    /// Whether the generated answer is correct; the accuracy side of ECE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_correct: Option<bool>,
    /// Target certainty level in percent, for MAE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_certainty: Option<u8>,
    /// Response sentence index → cited doc ids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub citations: Option<BTreeMap<usize, BTreeSet<String>>>,
}

impl GoldRecord {
    pub fn answerability(&self) -> AnswerabilityLabel {
        if self.answerable {
            AnswerabilityLabel::Answerable
        } else {
            AnswerabilityLabel::Unanswerable
        }
    }
}

pub fn read_gold(path: &Path) -> Result<Vec<GoldRecord>, DatasetError> {
    let records: Vec<GoldRecord> = read_jsonl(path)?;
    check_unique(path, records.iter().map(|r| r.id.as_str()))?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedRef {
    pub doc_id: String,
    pub score: f64,
}

/// One run-report line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub flow: FlowKind,
    pub final_response: Option<String>,
    pub abstained: bool,
    pub rewritten_query: Option<String>,
    pub retrieved: Vec<RetrievedRef>,
    pub answerability: Option<AnswerabilityLabel>,
    /// Names of the executed steps, in order.
    pub steps: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub faithfulness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certainty: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub citations: Option<BTreeMap<usize, BTreeSet<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    pub fn from_flow(id: &str, flow: FlowKind, result: &FlowResult) -> Self {
        RunRecord {
            id: id.into(),
            flow,
            final_response: Some(result.final_response.clone()),
            abstained: result.abstained,
            rewritten_query: result.rewritten_query.clone(),
            retrieved: result
                .retrieved
                .iter()
                .map(|p| RetrievedRef { doc_id: p.doc.doc_id.clone(), score: p.score })
                .collect(),
            answerability: result.answerability,
            steps: result.trace.iter().map(|s| s.step.clone()).collect(),
            faithfulness: None,
            certainty: None,
            citations: None,
            error: None,
        }
    }

    pub fn failed(id: &str, flow: FlowKind, steps: Vec<String>, error: String) -> Self {
        RunRecord {
            id: id.into(),
            flow,
            final_response: None,
            abstained: false,
            rewritten_query: None,
            retrieved: Vec::new(),
            answerability: None,
            steps,
            faithfulness: None,
            certainty: None,
            citations: None,
            error: Some(error),
        }
    }
}

pub fn read_run_report(path: &Path) -> Result<Vec<RunRecord>, DatasetError> {
    let records: Vec<RunRecord> = read_jsonl(path)?;
    check_unique(path, records.iter().map(|r| r.id.as_str()))?;
    Ok(records)
}
