//! Retrieval and the composite RAG flows.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Backend;
use crate::conversation::{check_documents, validate_conversation, Conversation, ConversationError, Document};
use crate::digest::short_digest;
use crate::intrinsics::{ExpandedQueries, IntrinsicError, Intrinsics};
use crate::parsing::AnswerabilityLabel;
use crate::prompts::{PromptError, RAG_INSTRUCTION};
use crate::registry::EndsWith;

/// Response emitted when a flow abstains.
pub const REFUSAL: &str = "I don't know the answer";

pub const DEFAULT_FLOW_K: usize = 5;
pub const DEFAULT_UNION_K: usize = 20;
pub const DEFAULT_UNION_CAP: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RetrievalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    InvalidDocuments(#[from] ConversationError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPassage {
    pub doc: Document,
    pub score: f64,
}

/// Descending score, then ascending doc id.
fn rank_order(a: &ScoredPassage, b: &ScoredPassage) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.doc.doc_id.cmp(&b.doc.doc_id))
}

pub trait Retriever {
    /// Top `k` passages for `query`, best first. Passages with no score are
    /// never returned.
    fn retrieve(&self, query: &str, k: usize) -> Vec<ScoredPassage>;
}

impl<R: Retriever + ?Sized> Retriever for &R {
    fn retrieve(&self, query: &str, k: usize) -> Vec<ScoredPassage> {
        (**self).retrieve(query, k)
    }
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// In-memory inverted index scored with `Σ tf · ln(1 + N/df)` over the
/// distinct query terms.
#[derive(Debug, Clone)]
pub struct TfIdfIndex {
    docs: Vec<Document>,
    postings: BTreeMap<String, Vec<(usize, u32)>>,
}

pub fn index(docs: Vec<Document>) -> Result<TfIdfIndex, RetrievalError> {
    TfIdfIndex::new(docs)
}

impl TfIdfIndex {
    pub fn new(docs: Vec<Document>) -> Result<Self, RetrievalError> {
        if docs.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        check_documents(&docs)?;
        let mut postings: BTreeMap<String, Vec<(usize, u32)>> = BTreeMap::new();
        for (d, doc) in docs.iter().enumerate() {
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            let title = doc.title.as_deref().unwrap_or("");
            for token in tokenize(title).chain(tokenize(&doc.text)) {
                *tf.entry(token).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((d, count));
            }
        }
        Ok(TfIdfIndex { docs, postings })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        let df = self.postings.get(term)?.len() as f64;
        Some(libm::log(1.0 + self.docs.len() as f64 / df))
    }
}

impl Retriever for TfIdfIndex {
    fn retrieve(&self, query: &str, k: usize) -> Vec<ScoredPassage> {
        let mut terms: Vec<String> = tokenize(query).collect();
        terms.sort();
        terms.dedup();
        let mut scores = alloc::vec![0.0f64; self.docs.len()];
        for term in &terms {
            if let (Some(list), Some(idf)) = (self.postings.get(term), self.idf(term)) {
                for &(d, tf) in list {
                    scores[d] += f64::from(tf) * idf;
                }
            }
        }
        let mut hits: Vec<ScoredPassage> = scores
            .into_iter()
            .enumerate()
            .filter(|(_, s)| *s > 0.0)
            .map(|(d, score)| ScoredPassage { doc: self.docs[d].clone(), score })
            .collect();
        hits.sort_by(rank_order);
        hits.truncate(k);
        hits
    }
}

pub fn retrieve<R: Retriever + ?Sized>(retriever: &R, query: &str, k: usize) -> Vec<ScoredPassage> {
    retriever.retrieve(query, k)
}

/// Union of per-query top-`k_per_query` lists, keyed by doc id with each
/// document keeping its best score, ranked and cut to `cap`.
pub fn retrieve_union<'q, R, Q>(retriever: &R, queries: Q, k_per_query: usize, cap: usize) -> Vec<ScoredPassage>
where
    R: Retriever + ?Sized,
    Q: IntoIterator<Item = &'q str>,
{
    let mut best: BTreeMap<String, ScoredPassage> = BTreeMap::new();
    for query in queries {
        for hit in retriever.retrieve(query, k_per_query) {
            match best.get_mut(&hit.doc.doc_id) {
                Some(existing) if existing.score >= hit.score => {}
                Some(existing) => *existing = hit,
                None => {
                    best.insert(hit.doc.doc_id.clone(), hit);
                }
            }
        }
    }
    let mut merged: Vec<ScoredPassage> = best.into_values().collect();
    merged.sort_by(rank_order);
    merged.truncate(cap);
    merged
}

/// [`retrieve_union`] over expanded query variants.
pub fn retrieve_expanded<R: Retriever + ?Sized>(
    retriever: &R,
    queries: &ExpandedQueries,
    k_per_query: usize,
    cap: usize,
) -> Vec<ScoredPassage> {
    retrieve_union(retriever, queries.queries(), k_per_query, cap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    None,
    Qr,
    Ad,
    QrAd,
}

impl FlowKind {
    pub fn rewrites(self) -> bool {
        matches!(self, FlowKind::Qr | FlowKind::QrAd)
    }

    pub fn checks_answerability(self) -> bool {
        matches!(self, FlowKind::Ad | FlowKind::QrAd)
    }
}

impl core::str::FromStr for FlowKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['+', '-'], "_").as_str() {
            "none" => Ok(FlowKind::None),
            "qr" => Ok(FlowKind::Qr),
            "ad" => Ok(FlowKind::Ad),
            "qr_ad" => Ok(FlowKind::QrAd),
            other => Err(alloc::format!("unknown flow `{other}` (expected none, qr, ad, qr_ad)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: String,
    pub input_digest: String,
    pub output_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowResult {
    pub final_response: String,
    pub abstained: bool,
    pub rewritten_query: Option<String>,
    pub retrieved: Vec<ScoredPassage>,
    pub answerability: Option<AnswerabilityLabel>,
    pub trace: Vec<TraceStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("flow failed after {} step(s): {error}", trace.len())]
pub struct FlowError {
    pub error: IntrinsicError,
    pub trace: Vec<TraceStep>,
}

struct Tracer(Vec<TraceStep>);

impl Tracer {
    fn record(&mut self, step: &str, input: &str, output: &str) {
        self.0.push(TraceStep {
            step: step.into(),
            input_digest: short_digest(input),
            output_digest: short_digest(output),
        });
    }

    fn fail(self, error: impl Into<IntrinsicError>) -> FlowError {
        FlowError { error: error.into(), trace: self.0 }
    }
}

fn doc_ids(passages: &[ScoredPassage]) -> String {
    passages.iter().map(|p| p.doc.doc_id.as_str()).collect::<Vec<_>>().join("\n")
}

/// Runs one composite flow.
///
/// * `none`: retrieve with the final query, then generate.
/// * `qr`: rewrite, retrieve with the rewrite, generate from the original
///   conversation.
/// * `ad`: retrieve, check answerability, abstain with [`REFUSAL`] or
///   generate.
/// * `qr_ad`: rewrite, retrieve with the rewrite, check answerability on the
///   original conversation, abstain or generate.
///
/// When nothing is retrieved, the answerability flows abstain without
/// calling the backend.
pub fn run_flow<B, R>(
    kind: FlowKind,
    conv: &Conversation,
    retriever: &R,
    intrinsics: &Intrinsics<B>,
    k: usize,
) -> Result<FlowResult, FlowError>
where
    B: Backend,
    R: Retriever + ?Sized,
{
    let mut tracer = Tracer(Vec::new());
    let conv = match validate_conversation(conv.clone(), EndsWith::UserQuery) {
        Ok(c) => c,
        Err(e) => return Err(tracer.fail(PromptError::from(e))),
    };
    let original_query = conv.last().content.clone();

    let rewritten_query = if kind.rewrites() {
        match intrinsics.rewrite_query(&conv) {
            Ok(r) => {
                tracer.record("rewrite_query", &original_query, &r.rewritten);
                Some(r.rewritten)
            }
            Err(e) => return Err(tracer.fail(e)),
        }
    } else {
        None
    };

    let query = rewritten_query.as_deref().unwrap_or(&original_query);
    let retrieved = retriever.retrieve(query, k);
    tracer.record("retrieve", query, &doc_ids(&retrieved));
    let docs: Vec<Document> = retrieved.iter().map(|p| p.doc.clone()).collect();

    let mut answerability = None;
    if kind.checks_answerability() {
        let label = if docs.is_empty() {
            tracer.record("no_passages", query, AnswerabilityLabel::Unanswerable.as_str());
            AnswerabilityLabel::Unanswerable
        } else {
            match intrinsics.determine_answerability(&conv, &docs) {
                Ok(label) => {
                    tracer.record("determine_answerability", &doc_ids(&retrieved), label.as_str());
                    label
                }
                Err(e) => return Err(tracer.fail(e)),
            }
        };
        answerability = Some(label);
        if label == AnswerabilityLabel::Unanswerable {
            return Ok(FlowResult {
                final_response: REFUSAL.into(),
                abstained: true,
                rewritten_query,
                retrieved,
                answerability,
                trace: tracer.0,
            });
        }
    }

    match intrinsics.generate_answer(&conv, &docs, Some(RAG_INSTRUCTION)) {
        Ok(response) => {
            tracer.record("generate", &doc_ids(&retrieved), &response);
            Ok(FlowResult {
                final_response: response.trim().to_string(),
                abstained: false,
                rewritten_query,
                retrieved,
                answerability,
                trace: tracer.0,
            })
        }
        Err(e) => Err(tracer.fail(e)),
    }
}
