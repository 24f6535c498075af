//! The eight intrinsics: render a prompt, call the backend, parse strictly.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, CompletionRequest, GenerationParams};
use crate::conversation::{normalize_documents, Conversation, ConversationError, Document, Role, Turn};
use crate::parsing::{
    parse_answerability, parse_certainty, parse_citations, parse_hallucination, parse_preference,
    parse_relevance, parse_rewrite, AnswerabilityLabel, CertaintyScore, CitationLink, Faithfulness,
    ParseError, Preference, RelevanceLabel, RewriteResult, SentenceVerdict,
};
use crate::prompts::{
    self, render, PromptError, PromptTemplate, RenderedPrompt, Trigger, BACKWARD_GENERATION_PROMPT,
    SYNONYMIC_REWRITE_PROMPT,
};
use crate::registry::IntrinsicName;
use crate::segmenter::{SegmentError, SentenceSpan};

/// Sentences whose faithfulness score falls below this mark the response as
/// hallucinated.
pub const HALLUCINATION_THRESHOLD: f64 = 0.1;

/// Passage count from which reranking switches from round-robin to a
/// single-elimination tournament.
pub const TOURNAMENT_MIN_PASSAGES: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IntrinsicError {
    #[error(transparent)]
    Conversation(#[from] ConversationError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{error} (raw completion: {raw:?})")]
    Parse { error: ParseError, raw: String },
    #[error("no passages to rerank")]
    NoPassages,
}

impl IntrinsicError {
    pub fn is_backend(&self) -> bool {
        matches!(self, IntrinsicError::Backend(_))
    }

    pub fn parse_error(&self) -> Option<&ParseError> {
        match self {
            IntrinsicError::Parse { error, .. } => Some(error),
            _ => None,
        }
    }
}

fn with_raw<T>(raw: &str, result: Result<T, ParseError>) -> Result<T, IntrinsicError> {
    result.map_err(|error| IntrinsicError::Parse { error, raw: raw.into() })
}

/// Generation settings per call kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntrinsicParams {
    pub rewrite: GenerationParams,
    pub relevance: GenerationParams,
    pub answerability: GenerationParams,
    /// Three tokens cover `NN%`.
    pub certainty: GenerationParams,
    pub hallucination: GenerationParams,
    pub citation: GenerationParams,
    pub rerank_judge: GenerationParams,
    /// Document-free answer sampling for query expansion.
    pub answer_sampling: GenerationParams,
    /// Backward generation and synonymic rewrite.
    pub expansion: GenerationParams,
    /// Answer generation in flows.
    pub generation: GenerationParams,
}

impl Default for IntrinsicParams {
    fn default() -> Self {
        IntrinsicParams {
            rewrite: GenerationParams::greedy(256),
            relevance: GenerationParams::greedy(32),
            answerability: GenerationParams::greedy(16),
            certainty: GenerationParams::greedy(3),
            hallucination: GenerationParams::greedy(2048),
            citation: GenerationParams::greedy(2048),
            rerank_judge: GenerationParams::greedy(64),
            answer_sampling: GenerationParams { max_tokens: 256, temperature: 0.7, ..Default::default() },
            expansion: GenerationParams::greedy(128),
            generation: GenerationParams::greedy(512),
        }
    }
}

impl IntrinsicParams {
    /// Sets the same sampling seed on every call kind.
    pub fn with_seed(mut self, seed: u64) -> Self {
        for p in [
            &mut self.rewrite,
            &mut self.relevance,
            &mut self.answerability,
            &mut self.certainty,
            &mut self.hallucination,
            &mut self.citation,
            &mut self.rerank_judge,
            &mut self.answer_sampling,
            &mut self.expansion,
            &mut self.generation,
        ] {
            p.seed = Some(seed);
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertaintyScenario {
    /// Score an answer that has been generated; the conversation ends with
    /// the assistant.
    PostAnswer,
    /// Predict certainty before answering; the conversation ends with the
    /// user.
    PreAnswer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationReport {
    pub verdicts: Vec<SentenceVerdict>,
    /// Response span of each verdict.
    pub spans: Vec<SentenceSpan>,
    /// Per-sentence faithfulness score, `None` for `NA` sentences.
    pub sentence_scores: Vec<Option<f64>>,
    pub response_flagged: bool,
}

/// 1.0 for faithful, 0.5 for partial, 0.0 for unfaithful; no score for
/// sentences without claims.
pub fn faithfulness_score(label: Faithfulness) -> Option<f64> {
    match label {
        Faithfulness::Faithful => Some(1.0),
        Faithfulness::Partial => Some(0.5),
        Faithfulness::Unfaithful => Some(0.0),
        Faithfulness::NotApplicable => None,
    }
}

impl HallucinationReport {
    pub fn from_verdicts(verdicts: Vec<SentenceVerdict>, spans: Vec<SentenceSpan>) -> Self {
        let sentence_scores: Vec<_> = verdicts.iter().map(|v| faithfulness_score(v.f)).collect();
        let response_flagged = sentence_scores.iter().flatten().any(|&s| s < HALLUCINATION_THRESHOLD);
        HallucinationReport { verdicts, spans, sentence_scores, response_flagged }
    }

    /// Mean score over sentences that make claims.
    pub fn mean_faithfulness(&self) -> Option<f64> {
        let scored: Vec<f64> = self.sentence_scores.iter().flatten().copied().collect();
        (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextCitation {
    pub c: usize,
    pub doc_id: String,
    pub doc_ordinal: usize,
    pub span: SentenceSpan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedCitation {
    pub r: usize,
    pub response_span: SentenceSpan,
    pub context: Vec<ContextCitation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitationReport {
    pub links: Vec<CitationLink>,
    pub citations: Vec<ResolvedCitation>,
    /// Response sentence → ids of the documents its cited sentences belong to.
    pub passage_level: BTreeMap<usize, BTreeSet<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankMethod {
    Identity,
    RoundRobin,
    Tournament,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeFailure {
    pub a: usize,
    pub b: usize,
    pub reason: String,
}

/// Reranking outcome, as indices into the input passage list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedPassages {
    pub order: Vec<usize>,
    /// Passages left out of the tournament as odd leftovers of a round.
    pub dropped: Vec<usize>,
    pub method: RerankMethod,
    /// Wins per input passage (round-robin only).
    pub win_counts: Option<Vec<u32>>,
    pub comparisons_used: usize,
    /// Pairs whose judgment failed; the win went to passage A.
    pub judge_failures: Vec<JudgeFailure>,
}

impl RankedPassages {
    pub fn ranked<'d>(&self, passages: &'d [Document]) -> Vec<&'d Document> {
        self.order.iter().map(|&i| &passages[i]).collect()
    }
}

/// Ranks `n` passages given a batch judge.
///
/// `judge` receives the pairs of one batch (lower original index first, as
/// passage A) and returns one outcome per pair. A failed outcome awards the
/// win to passage A and is recorded.
pub fn rank_pairwise<J>(n: usize, mut judge: J) -> RankedPassages
where
    J: FnMut(&[(usize, usize)]) -> Vec<Result<Preference, String>>,
{
    let mut failures = Vec::new();
    let mut decide = |pairs: &[(usize, usize)]| -> Vec<usize> {
        let outcomes = judge(pairs);
        pairs
            .iter()
            .enumerate()
            .map(|(k, &(a, b))| match outcomes.get(k) {
                Some(Ok(Preference::A)) => a,
                Some(Ok(Preference::B)) => b,
                Some(Err(reason)) => {
                    failures.push(JudgeFailure { a, b, reason: reason.clone() });
                    a
                }
                None => {
                    failures.push(JudgeFailure { a, b, reason: "judge returned no outcome".into() });
                    a
                }
            })
            .collect()
    };

    if n <= 1 {
        return RankedPassages {
            order: (0..n).collect(),
            dropped: Vec::new(),
            method: RerankMethod::Identity,
            win_counts: None,
            comparisons_used: 0,
            judge_failures: Vec::new(),
        };
    }

    if n < TOURNAMENT_MIN_PASSAGES {
        let pairs: Vec<(usize, usize)> =
            (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
        let winners = decide(&pairs);
        let mut wins = alloc::vec![0u32; n];
        for w in winners {
            wins[w] += 1;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| wins[y].cmp(&wins[x]).then(x.cmp(&y)));
        return RankedPassages {
            order,
            dropped: Vec::new(),
            method: RerankMethod::RoundRobin,
            win_counts: Some(wins),
            comparisons_used: pairs.len(),
            judge_failures: failures,
        };
    }

    let mut alive: Vec<usize> = (0..n).collect();
    let mut dropped = Vec::new();
    let mut losers: Vec<(usize, usize)> = Vec::new(); // (round, passage)
    let mut comparisons = 0;
    let mut round = 0;
    while alive.len() > 1 {
        if alive.len() % 2 == 1 {
            dropped.extend(alive.pop());
        }
        let pairs: Vec<(usize, usize)> = alive.chunks(2).map(|p| (p[0], p[1])).collect();
        let winners = decide(&pairs);
        comparisons += pairs.len();
        for (&(a, b), &w) in pairs.iter().zip(&winners) {
            losers.push((round, if w == a { b } else { a }));
        }
        alive = winners;
        round += 1;
    }
    losers.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
    let mut order = alive;
    order.extend(losers.into_iter().map(|(_, p)| p));
    RankedPassages {
        order,
        dropped,
        method: RerankMethod::Tournament,
        win_counts: None,
        comparisons_used: comparisons,
        judge_failures: failures,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionStrategy {
    LastTurn,
    Rewrite,
    AnswerSampling,
    BackwardGeneration,
    Synonymic,
}

impl ExpansionStrategy {
    pub const ALL: [ExpansionStrategy; 5] = [
        ExpansionStrategy::LastTurn,
        ExpansionStrategy::Rewrite,
        ExpansionStrategy::AnswerSampling,
        ExpansionStrategy::BackwardGeneration,
        ExpansionStrategy::Synonymic,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryVariant {
    pub strategy: ExpansionStrategy,
    pub query: String,
}

impl QueryVariant {
    pub fn as_turn(&self) -> Turn {
        Turn::new(Role::User, self.query.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyFailure {
    pub strategy: ExpansionStrategy,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandedQueries {
    pub variants: Vec<QueryVariant>,
    pub failures: Vec<StrategyFailure>,
}

impl ExpandedQueries {
    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.variants.iter().map(|v| v.query.as_str())
    }
}

fn normalize_query(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Intrinsic runner bound to a backend.
pub struct Intrinsics<B> {
    backend: B,
    pub template: PromptTemplate,
    pub params: IntrinsicParams,
}

impl<B: Backend> Intrinsics<B> {
    pub fn new(backend: B) -> Self {
        Intrinsics { backend, template: PromptTemplate::default(), params: IntrinsicParams::default() }
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }

    pub fn with_params(mut self, params: IntrinsicParams) -> Self {
        self.params = params;
        self
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    fn request(
        &self,
        prompt: &RenderedPrompt,
        params: &GenerationParams,
        intrinsic: Option<IntrinsicName>,
        tag: String,
    ) -> CompletionRequest {
        CompletionRequest { prompt: prompt.text.clone(), params: params.clone(), tag, intrinsic }
    }

    fn call(
        &self,
        prompt: &RenderedPrompt,
        params: &GenerationParams,
        intrinsic: Option<IntrinsicName>,
        tag: &str,
    ) -> Result<String, IntrinsicError> {
        let req = self.request(prompt, params, intrinsic, tag.into());
        Ok(self.backend.generate(&req)?.text)
    }

    fn render(&self, conv: &Conversation, docs: Option<&[Document]>, trigger: &Trigger) -> Result<RenderedPrompt, IntrinsicError> {
        Ok(render(&self.template, conv, docs, trigger)?)
    }

    pub fn rewrite_query(&self, conv: &Conversation) -> Result<RewriteResult, IntrinsicError> {
        let prompt = self.render(conv, None, &Trigger::Rewrite)?;
        let raw = self.call(&prompt, &self.params.rewrite, Some(IntrinsicName::Qr), "QR")?;
        with_raw(&raw, parse_rewrite(&raw, &conv.last().content))
    }

    pub fn classify_relevance(&self, conv: &Conversation, doc: &Document) -> Result<RelevanceLabel, IntrinsicError> {
        let prompt = self.render(conv, Some(core::slice::from_ref(doc)), &Trigger::Relevance)?;
        let raw = self.call(&prompt, &self.params.relevance, Some(IntrinsicName::Cr), "CR")?;
        with_raw(&raw, parse_relevance(&raw))
    }

    /// One relevance judgment per document, batched, in input order.
    pub fn classify_relevance_many(
        &self,
        conv: &Conversation,
        docs: &[Document],
    ) -> Result<Vec<Result<RelevanceLabel, IntrinsicError>>, IntrinsicError> {
        if docs.is_empty() {
            return Err(PromptError::MissingDocuments { intrinsic: IntrinsicName::Cr }.into());
        }
        let prompts = docs
            .iter()
            .map(|doc| self.render(conv, Some(core::slice::from_ref(doc)), &Trigger::Relevance))
            .collect::<Result<Vec<_>, _>>()?;
        let reqs: Vec<_> = prompts
            .iter()
            .enumerate()
            .map(|(k, p)| self.request(p, &self.params.relevance, Some(IntrinsicName::Cr), format!("CR-{k}")))
            .collect();
        Ok(self
            .backend
            .generate_batch(&reqs)
            .into_iter()
            .map(|res| {
                let raw = res?.text;
                with_raw(&raw, parse_relevance(&raw))
            })
            .collect())
    }

    pub fn determine_answerability(&self, conv: &Conversation, docs: &[Document]) -> Result<AnswerabilityLabel, IntrinsicError> {
        let prompt = self.render(conv, Some(docs), &Trigger::Answerability)?;
        let raw = self.call(&prompt, &self.params.answerability, Some(IntrinsicName::Ad), "AD")?;
        with_raw(&raw, parse_answerability(&raw))
    }

    pub fn score_certainty(
        &self,
        conv: &Conversation,
        docs: Option<&[Document]>,
        scenario: CertaintyScenario,
    ) -> Result<CertaintyScore, IntrinsicError> {
        let (expected, wanted) = match scenario {
            CertaintyScenario::PostAnswer => ("an assistant response", Role::Assistant),
            CertaintyScenario::PreAnswer => ("a user query", Role::User),
        };
        let actual = conv.last().role;
        if actual != wanted {
            return Err(PromptError::TerminalRoleMismatch { expected, actual }.into());
        }
        let prompt = self.render(conv, docs, &Trigger::Certainty)?;
        let raw = self.call(&prompt, &self.params.certainty, Some(IntrinsicName::Uq), "UQ")?;
        with_raw(&raw, parse_certainty(&raw))
    }

    pub fn detect_hallucinations(&self, conv: &Conversation, docs: &[Document]) -> Result<HallucinationReport, IntrinsicError> {
        let prompt = self.render(conv, Some(docs), &Trigger::Hallucination)?;
        let tagged = prompt.meta.response.clone().expect("hallucination prompt carries tagged response");
        let raw = self.call(&prompt, &self.params.hallucination, Some(IntrinsicName::Hd), "HD")?;
        let verdicts = with_raw(&raw, parse_hallucination(&raw, tagged.len()))?;
        let ids: Vec<usize> = verdicts.iter().map(|v| v.i).collect();
        let spans = tagged.spans_for_ids(&ids)?;
        Ok(HallucinationReport::from_verdicts(verdicts, spans))
    }

    pub fn generate_citations(&self, conv: &Conversation, docs: &[Document]) -> Result<CitationReport, IntrinsicError> {
        let prompt = self.render(conv, Some(docs), &Trigger::Citation)?;
        let meta = &prompt.meta;
        let tagged = meta.response.as_ref().expect("citation prompt carries tagged response");
        let index = meta.context.as_ref().expect("citation prompt carries context index");
        let raw = self.call(&prompt, &self.params.citation, Some(IntrinsicName::Cg), "CG")?;
        let links = with_raw(&raw, parse_citations(&raw, tagged.len(), index.len()))?;

        let mut citations = Vec::with_capacity(links.len());
        let mut passage_level = BTreeMap::new();
        for link in &links {
            let response_span = tagged.spans_for_ids(&[link.r])?[0];
            let resolved = index.spans_for_ids(&link.c)?;
            let context: Vec<ContextCitation> = link
                .c
                .iter()
                .zip(resolved)
                .map(|(&c, (doc_ordinal, span))| ContextCitation {
                    c,
                    doc_id: index.documents[doc_ordinal].doc_id.clone(),
                    doc_ordinal,
                    span,
                })
                .collect();
            passage_level.insert(link.r, context.iter().map(|c| c.doc_id.clone()).collect());
            citations.push(ResolvedCitation { r: link.r, response_span, context });
        }
        Ok(CitationReport { links, citations, passage_level })
    }

    /// Pairwise LLM-judged reranking of `passages` for the final user query.
    pub fn rerank(
        &self,
        conv: &Conversation,
        passages: &[Document],
        judge_prompt: Option<&str>,
    ) -> Result<RankedPassages, IntrinsicError> {
        if passages.is_empty() {
            return Err(IntrinsicError::NoPassages);
        }
        // surface conversation problems before any judging
        self.render(
            conv,
            None,
            &Trigger::Pairwise {
                judge_prompt: judge_prompt.map(String::from),
                passage_a: passages[0].clone(),
                passage_b: passages[0].clone(),
            },
        )?;
        let mut render_error = None;
        let ranked = rank_pairwise(passages.len(), |pairs| {
            let mut reqs = Vec::with_capacity(pairs.len());
            for &(a, b) in pairs {
                let trigger = Trigger::Pairwise {
                    judge_prompt: judge_prompt.map(String::from),
                    passage_a: passages[a].clone(),
                    passage_b: passages[b].clone(),
                };
                match self.render(conv, None, &trigger) {
                    Ok(p) => reqs.push(self.request(&p, &self.params.rerank_judge, Some(IntrinsicName::Prr), format!("PRR-{a}-{b}"))),
                    Err(e) => {
                        render_error.get_or_insert(e);
                        return Vec::new();
                    }
                }
            }
            self.backend
                .generate_batch(&reqs)
                .into_iter()
                .map(|res| match res {
                    Ok(resp) => parse_preference(&resp.text).map_err(|e| format!("{e}: {:?}", resp.text)),
                    Err(e) => Err(e.to_string()),
                })
                .collect()
        });
        match render_error {
            Some(e) => Err(e),
            None => Ok(ranked),
        }
    }

    /// Query variants from the selected strategies. The final user query is
    /// always included; duplicates (case and whitespace insensitive) keep
    /// their first occurrence. Failed strategies are recorded and skipped.
    pub fn expand_query(
        &self,
        conv: &Conversation,
        strategies: &BTreeSet<ExpansionStrategy>,
    ) -> Result<ExpandedQueries, IntrinsicError> {
        let conv = crate::conversation::validate_conversation(conv.clone(), crate::registry::EndsWith::UserQuery)
            .map_err(PromptError::from)?;
        let last = conv.last().content.clone();
        let mut results: BTreeMap<ExpansionStrategy, Result<String, IntrinsicError>> = BTreeMap::new();
        results.insert(ExpansionStrategy::LastTurn, Ok(last.clone()));

        let wants = |s| strategies.contains(&s);
        let mut first_wave: Vec<(ExpansionStrategy, CompletionRequest)> = Vec::new();
        if wants(ExpansionStrategy::Rewrite) {
            let p = self.render(&conv, None, &Trigger::Rewrite)?;
            first_wave.push((ExpansionStrategy::Rewrite, self.request(&p, &self.params.rewrite, Some(IntrinsicName::Qr), "QE-rewrite".into())));
        }
        let need_answer = wants(ExpansionStrategy::AnswerSampling) || wants(ExpansionStrategy::BackwardGeneration);
        if need_answer {
            let p = self.render(&conv, None, &Trigger::Generate { instruction: None })?;
            first_wave.push((
                ExpansionStrategy::AnswerSampling,
                self.request(&p, &self.params.answer_sampling, None, "QE-answer".into()),
            ));
        }
        if wants(ExpansionStrategy::Synonymic) {
            let single = Conversation::new(alloc::vec![Turn::user(prompts::fill(SYNONYMIC_REWRITE_PROMPT, "query", &last))])?;
            let p = self.render(&single, None, &Trigger::Generate { instruction: None })?;
            first_wave.push((ExpansionStrategy::Synonymic, self.request(&p, &self.params.expansion, None, "QE-synonymic".into())));
        }

        let reqs: Vec<_> = first_wave.iter().map(|(_, r)| r.clone()).collect();
        for ((strategy, _), res) in first_wave.iter().zip(self.backend.generate_batch(&reqs)) {
            let value = res.map_err(IntrinsicError::from).and_then(|resp| match strategy {
                ExpansionStrategy::Rewrite => with_raw(&resp.text, parse_rewrite(&resp.text, &last)).map(|r| r.rewritten),
                _ => non_empty(resp.text),
            });
            results.insert(*strategy, value);
        }

        if wants(ExpansionStrategy::BackwardGeneration) {
            let value = match &results[&ExpansionStrategy::AnswerSampling] {
                Ok(answer) => {
                    let single = Conversation::new(alloc::vec![Turn::user(prompts::fill(BACKWARD_GENERATION_PROMPT, "answer", answer))])?;
                    let p = self.render(&single, None, &Trigger::Generate { instruction: None })?;
                    self.call(&p, &self.params.expansion, None, "QE-backward").and_then(non_empty)
                }
                Err(e) => Err(e.clone()),
            };
            results.insert(ExpansionStrategy::BackwardGeneration, value);
        }

        let mut seen = BTreeSet::new();
        let mut variants = Vec::new();
        let mut failures = Vec::new();
        for strategy in ExpansionStrategy::ALL {
            if strategy != ExpansionStrategy::LastTurn && !wants(strategy) {
                continue;
            }
            match results.remove(&strategy) {
                Some(Ok(query)) => {
                    if seen.insert(normalize_query(&query)) {
                        variants.push(QueryVariant { strategy, query });
                    }
                }
                Some(Err(e)) => failures.push(StrategyFailure { strategy, error: e.to_string() }),
                None => {}
            }
        }
        Ok(ExpandedQueries { variants, failures })
    }

    /// Plain grounded answer generation.
    pub fn generate_answer(&self, conv: &Conversation, docs: &[Document], instruction: Option<&str>) -> Result<String, IntrinsicError> {
        let trigger = Trigger::Generate { instruction: instruction.map(String::from) };
        let prompt = self.render(conv, Some(docs), &trigger)?;
        self.call(&prompt, &self.params.generation, None, "generate")
    }

    /// Runs an invocation record and returns the wire-shaped result.
    pub fn invoke(&self, record: &InvocationRecord) -> Result<IntrinsicOutput, IntrinsicError> {
        let conv = &record.conversation;
        let docs = normalize_documents(record.documents.clone())?;
        let params = &record.params;
        Ok(match record.intrinsic {
            IntrinsicName::Qr => {
                let r = self.rewrite_query(conv)?;
                IntrinsicOutput::Qr { rewritten_question: r.rewritten, unchanged: r.unchanged }
            }
            IntrinsicName::Qe => {
                let strategies: BTreeSet<_> = match &params.strategies {
                    Some(list) => list.iter().copied().collect(),
                    None => ExpansionStrategy::ALL.into_iter().collect(),
                };
                let expanded = self.expand_query(conv, &strategies)?;
                IntrinsicOutput::Qe {
                    queries: expanded
                        .variants
                        .into_iter()
                        .map(|v| WireQuery { strategy: v.strategy, role: Role::User, content: v.query })
                        .collect(),
                    failures: expanded.failures,
                }
            }
            IntrinsicName::Cr => {
                let labels = self.classify_relevance_many(conv, &docs)?;
                let results = docs
                    .iter()
                    .zip(labels)
                    .map(|(d, l)| l.map(|label| WireRelevance { doc_id: d.doc_id.clone(), context_relevance: label.as_wire().into() }))
                    .collect::<Result<Vec<_>, _>>()?;
                IntrinsicOutput::Cr { results }
            }
            IntrinsicName::Ad => IntrinsicOutput::Ad { answerability: self.determine_answerability(conv, &docs)? },
            IntrinsicName::Prr => {
                let ranked = self.rerank(conv, &docs, params.judge_prompt.as_deref())?;
                let id = |i: &usize| docs[*i].doc_id.clone();
                IntrinsicOutput::Prr {
                    ranking: ranked.order.iter().map(id).collect(),
                    dropped: ranked.dropped.iter().map(id).collect(),
                    method: ranked.method,
                    win_counts: ranked.win_counts,
                    comparisons_used: ranked.comparisons_used,
                    judge_failures: ranked.judge_failures,
                }
            }
            IntrinsicName::Uq => {
                let scenario = params.scenario.unwrap_or(match conv.last().role {
                    Role::Assistant => CertaintyScenario::PostAnswer,
                    _ => CertaintyScenario::PreAnswer,
                });
                let docs = (!docs.is_empty()).then_some(docs.as_slice());
                let s = self.score_certainty(conv, docs, scenario)?;
                IntrinsicOutput::Uq { certainty: s.percent, normalized: s.normalized, raw: s.raw }
            }
            IntrinsicName::Hd => {
                let report = self.detect_hallucinations(conv, &docs)?;
                IntrinsicOutput::Hd {
                    verdicts: report
                        .verdicts
                        .iter()
                        .zip(&report.spans)
                        .zip(&report.sentence_scores)
                        .map(|((v, s), score)| WireVerdict {
                            i: v.i,
                            f: v.f,
                            r: v.r.clone(),
                            start: s.start,
                            end: s.end,
                            score: *score,
                        })
                        .collect(),
                    response_flagged: report.response_flagged,
                }
            }
            IntrinsicName::Cg => {
                let report = self.generate_citations(conv, &docs)?;
                IntrinsicOutput::Cg { citations: report.citations, passage_level: report.passage_level }
            }
        })
    }
}

fn non_empty(text: String) -> Result<String, IntrinsicError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        Err(IntrinsicError::Parse { error: ParseError::MalformedOutput("empty completion".into()), raw: text })
    } else {
        Ok(trimmed.into())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<CertaintyScenario>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategies: Option<Vec<ExpansionStrategy>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_prompt: Option<String>,
}

/// Uniform request for any intrinsic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub intrinsic: IntrinsicName,
    pub conversation: Conversation,
    #[serde(default)]
    pub documents: Vec<Document>,
    #[serde(default)]
    pub params: InvocationParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireQuery {
    pub strategy: ExpansionStrategy,
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRelevance {
    pub doc_id: String,
    pub context_relevance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireVerdict {
    pub i: usize,
    pub f: Faithfulness,
    pub r: String,
    pub start: usize,
    pub end: usize,
    pub score: Option<f64>,
}

/// Uniform result, tagged by intrinsic name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "intrinsic")]
pub enum IntrinsicOutput {
    #[serde(rename = "QR")]
    Qr { rewritten_question: String, unchanged: bool },
    #[serde(rename = "QE")]
    Qe { queries: Vec<WireQuery>, failures: Vec<StrategyFailure> },
    #[serde(rename = "CR")]
    Cr { results: Vec<WireRelevance> },
    #[serde(rename = "AD")]
    Ad { answerability: AnswerabilityLabel },
    #[serde(rename = "PRR")]
    Prr {
        ranking: Vec<String>,
        dropped: Vec<String>,
        method: RerankMethod,
        win_counts: Option<Vec<u32>>,
        comparisons_used: usize,
        judge_failures: Vec<JudgeFailure>,
    },
    #[serde(rename = "UQ")]
    Uq { certainty: u8, normalized: bool, raw: String },
    #[serde(rename = "HD")]
    Hd { verdicts: Vec<WireVerdict>, response_flagged: bool },
    #[serde(rename = "CG")]
    Cg { citations: Vec<ResolvedCitation>, passage_level: BTreeMap<usize, BTreeSet<String>> },
}
