//! Strict parsers for intrinsic completions.
//!
//! Extraction is lenient: JSON outputs are located as the first well-formed
//! JSON value in the completion with the expected shape, so prose around it
//! is ignored, and token outputs read the first matching token. Validation
//! afterwards is strict: a parser either returns a value that satisfies every
//! invariant of its type or a [`ParseError`].
//!
//! Wire shapes:
//!
//! | intrinsic | completion shape |
//! |-----------|------------------|
//! | QR  | `{"rewritten_question": "<text>"}` |
//! | CR  | `{"context_relevance": "relevant" \| "partially relevant" \| "irrelevant"}` |
//! | AD  | `answerable` \| `unanswerable` |
//! | UQ  | `<NN>%` followed by anything |
//! | HD  | `[{"i": <int>, "f": "faithful" \| "unfaithful" \| "partial" \| "NA", "r": "<text>"}, ...]` |
//! | CG  | `[{"r": <int>, "c": [<int>, ...]}, ...]` |
//! | PRR | `A` or `B`, optionally as `passage A`, followed by anything |

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("malformed output: {0}")]
    MalformedOutput(String),
    #[error("rewritten question is empty")]
    EmptyRewrite,
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("no leading percentage")]
    NoPercentage,
    #[error("missing sentence ids {0:?}")]
    MissingSentenceIds(Vec<usize>),
    #[error("sentence id {0} appears more than once")]
    DuplicateSentenceId(usize),
    #[error("{kind} id {id} out of range (expected < {limit})")]
    IdOutOfRange { kind: IdKind, id: usize, limit: usize },
    #[error("no A/B preference token")]
    NoPreferenceToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdKind {
    Response,
    Context,
}

impl fmt::Display for IdKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IdKind::Response => "response sentence",
            IdKind::Context => "context sentence",
        })
    }
}

fn malformed(reason: &str) -> ParseError {
    ParseError::MalformedOutput(reason.into())
}

/// Well-formed JSON objects and arrays found in `text`, left to right. Scanning
/// resumes after the end of each value, so nested values are not yielded.
fn json_values(text: &str) -> impl Iterator<Item = Value> + '_ {
    let mut pos = 0;
    core::iter::from_fn(move || {
        while let Some(offset) = text[pos..].find(['{', '[']) {
            let start = pos + offset;
            let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
            match stream.next() {
                Some(Ok(value)) => {
                    pos = start + stream.byte_offset();
                    return Some(value);
                }
                _ => pos = start + 1,
            }
        }
        None
    })
}

fn first_object_with(text: &str, key: &str) -> Option<Map<String, Value>> {
    json_values(text).find_map(|v| match v {
        Value::Object(map) if map.contains_key(key) => Some(map),
        _ => None,
    })
}

/// The first bare array, or the single list-valued field of the first object
/// that has exactly one.
fn first_list(text: &str) -> Option<Vec<Value>> {
    json_values(text).find_map(|v| match v {
        Value::Array(items) => Some(items),
        Value::Object(map) => {
            let mut lists = map.into_iter().filter_map(|(_, v)| match v {
                Value::Array(items) => Some(items),
                _ => None,
            });
            match (lists.next(), lists.next()) {
                (Some(items), None) => Some(items),
                _ => None,
            }
        }
        _ => None,
    })
}

fn as_index(value: &Value, field: &str) -> Result<usize, ParseError> {
    value
        .as_u64()
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| ParseError::MalformedOutput(alloc::format!("field `{field}` must be a non-negative integer")))
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteResult {
    pub rewritten: String,
    /// The model echoed the original query (modulo whitespace).
    pub unchanged: bool,
}

pub fn parse_rewrite(text: &str, original_query: &str) -> Result<RewriteResult, ParseError> {
    let map = first_object_with(text, "rewritten_question")
        .ok_or_else(|| malformed("no JSON object with key `rewritten_question`"))?;
    let rewritten = map["rewritten_question"]
        .as_str()
        .ok_or_else(|| malformed("`rewritten_question` must be a string"))?
        .trim();
    if rewritten.is_empty() {
        return Err(ParseError::EmptyRewrite);
    }
    Ok(RewriteResult {
        rewritten: rewritten.into(),
        unchanged: collapse_whitespace(rewritten) == collapse_whitespace(original_query),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceLabel {
    Relevant,
    PartiallyRelevant,
    Irrelevant,
}

impl RelevanceLabel {
    /// The label as the model writes it.
    pub fn as_wire(self) -> &'static str {
        match self {
            RelevanceLabel::Relevant => "relevant",
            RelevanceLabel::PartiallyRelevant => "partially relevant",
            RelevanceLabel::Irrelevant => "irrelevant",
        }
    }
}

pub fn parse_relevance(text: &str) -> Result<RelevanceLabel, ParseError> {
    let map = first_object_with(text, "context_relevance")
        .ok_or_else(|| malformed("no JSON object with key `context_relevance`"))?;
    let raw = map["context_relevance"]
        .as_str()
        .ok_or_else(|| malformed("`context_relevance` must be a string"))?;
    let normalized = collapse_whitespace(&raw.to_lowercase().replace(['_', '-'], " "));
    match normalized.as_str() {
        "relevant" => Ok(RelevanceLabel::Relevant),
        "partially relevant" => Ok(RelevanceLabel::PartiallyRelevant),
        "irrelevant" => Ok(RelevanceLabel::Irrelevant),
        _ => Err(ParseError::UnknownLabel(raw.into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerabilityLabel {
    Answerable,
    Unanswerable,
}

impl AnswerabilityLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            AnswerabilityLabel::Answerable => "answerable",
            AnswerabilityLabel::Unanswerable => "unanswerable",
        }
    }
}

pub fn parse_answerability(text: &str) -> Result<AnswerabilityLabel, ParseError> {
    let token = text
        .split_whitespace()
        .next()
        .unwrap_or("")
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    match token.as_str() {
        "answerable" => Ok(AnswerabilityLabel::Answerable),
        "unanswerable" => Ok(AnswerabilityLabel::Unanswerable),
        _ => Err(ParseError::UnknownLabel(token)),
    }
}

/// The ten certainty levels a calibrated model emits.
pub const CERTAINTY_LEVELS: [u8; 10] = [5, 15, 25, 35, 45, 55, 65, 75, 85, 95];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertaintyScore {
    pub percent: u8,
    pub raw: String,
    /// The emitted value was off-grid and got snapped to a level.
    pub normalized: bool,
}

impl CertaintyScore {
    /// A score at an exact level, e.g. for gold data.
    pub fn from_level(percent: u8) -> Option<Self> {
        CERTAINTY_LEVELS.contains(&percent).then(|| CertaintyScore {
            percent,
            raw: alloc::format!("{percent}%"),
            normalized: false,
        })
    }

    pub fn probability(&self) -> f64 {
        f64::from(self.percent) / 100.0
    }

    /// Position of the level on the 0..=9 scale (5% → 0, 95% → 9).
    pub fn decile(&self) -> u8 {
        percent_to_decile(self.percent)
    }
}

/// Maps a certainty level to its 0..=9 index.
pub fn percent_to_decile(percent: u8) -> u8 {
    snap_certainty(u64::from(percent)) / 10
}

/// Nearest certainty level; exact midpoints go to the lower level.
pub fn snap_certainty(value: u64) -> u8 {
    let mut best = CERTAINTY_LEVELS[0];
    for level in CERTAINTY_LEVELS {
        if u64::from(level).abs_diff(value) < u64::from(best).abs_diff(value) {
            best = level;
        }
    }
    best
}

pub fn parse_certainty(text: &str) -> Result<CertaintyScore, ParseError> {
    let trimmed = text.trim_start();
    let digits_len = trimmed.bytes().take_while(u8::is_ascii_digit).count();
    if digits_len == 0 || !trimmed[digits_len..].trim_start().starts_with('%') {
        return Err(ParseError::NoPercentage);
    }
    let value = trimmed[..digits_len]
        .bytes()
        .fold(0u64, |acc, d| acc.saturating_mul(10).saturating_add(u64::from(d - b'0')));
    let percent = snap_certainty(value);
    Ok(CertaintyScore {
        percent,
        raw: text.to_string(),
        normalized: u64::from(percent) != value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Faithfulness {
    #[serde(rename = "faithful")]
    Faithful,
    #[serde(rename = "unfaithful")]
    Unfaithful,
    #[serde(rename = "partial")]
    Partial,
    /// The sentence makes no claim.
    #[serde(rename = "NA")]
    NotApplicable,
}

impl Faithfulness {
    /// `faithful`, `unfaithful` and `partial` match case-insensitively; the
    /// no-claim label must be exactly `NA`.
    pub fn from_label(label: &str) -> Option<Self> {
        let label = label.trim();
        if label == "NA" {
            return Some(Faithfulness::NotApplicable);
        }
        match label.to_lowercase().as_str() {
            "faithful" => Some(Faithfulness::Faithful),
            "unfaithful" => Some(Faithfulness::Unfaithful),
            "partial" => Some(Faithfulness::Partial),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceVerdict {
    pub i: usize,
    pub f: Faithfulness,
    pub r: String,
}

fn check_ids(
    ids: impl IntoIterator<Item = usize>,
    limit: usize,
    require_all: bool,
) -> Result<(), ParseError> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if id >= limit {
            return Err(ParseError::IdOutOfRange { kind: IdKind::Response, id, limit });
        }
        if !seen.insert(id) {
            return Err(ParseError::DuplicateSentenceId(id));
        }
    }
    if require_all {
        let missing: Vec<usize> = (0..limit).filter(|id| !seen.contains(id)).collect();
        if !missing.is_empty() {
            return Err(ParseError::MissingSentenceIds(missing));
        }
    }
    Ok(())
}

/// Parses hallucination verdicts for a response of `n_sentences`
/// sentences. Every id in `0..n_sentences` must appear exactly once; the
/// result is sorted by id.
pub fn parse_hallucination(text: &str, n_sentences: usize) -> Result<Vec<SentenceVerdict>, ParseError> {
    let items = first_list(text).ok_or_else(|| malformed("no JSON list of sentence verdicts"))?;
    let mut verdicts = Vec::with_capacity(items.len());
    for item in &items {
        let obj = item.as_object().ok_or_else(|| malformed("verdict must be an object"))?;
        let i = as_index(obj.get("i").ok_or_else(|| malformed("verdict lacks `i`"))?, "i")?;
        let label = obj
            .get("f")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed("verdict lacks string `f`"))?;
        let f = Faithfulness::from_label(label).ok_or_else(|| ParseError::UnknownLabel(label.into()))?;
        let r = obj
            .get("r")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed("verdict lacks string `r`"))?;
        verdicts.push(SentenceVerdict { i, f, r: r.into() });
    }
    check_ids(verdicts.iter().map(|v| v.i), n_sentences, true)?;
    verdicts.sort_by_key(|v| v.i);
    Ok(verdicts)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitationLink {
    pub r: usize,
    pub c: Vec<usize>,
}

/// Parses citation links. Response ids must be unique and below
/// `n_response`; context ids below `n_context`. Sentences may be left out or
/// carry an empty list. The result is sorted by response id.
pub fn parse_citations(text: &str, n_response: usize, n_context: usize) -> Result<Vec<CitationLink>, ParseError> {
    let items = first_list(text).ok_or_else(|| malformed("no JSON list of citations"))?;
    let mut links = Vec::with_capacity(items.len());
    for item in &items {
        let obj = item.as_object().ok_or_else(|| malformed("citation must be an object"))?;
        let r = as_index(obj.get("r").ok_or_else(|| malformed("citation lacks `r`"))?, "r")?;
        let c = obj
            .get("c")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed("citation lacks list `c`"))?
            .iter()
            .map(|v| as_index(v, "c"))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(&id) = c.iter().find(|&&id| id >= n_context) {
            return Err(ParseError::IdOutOfRange { kind: IdKind::Context, id, limit: n_context });
        }
        links.push(CitationLink { r, c });
    }
    check_ids(links.iter().map(|l| l.r), n_response, false)?;
    links.sort_by_key(|l| l.r);
    Ok(links)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preference {
    A,
    B,
}

/// First standalone `A` or `B` token, case-insensitive.
pub fn parse_preference(text: &str) -> Result<Preference, ParseError> {
    text.split(|c: char| !c.is_alphanumeric())
        .find_map(|token| match token {
            "A" | "a" => Some(Preference::A),
            "B" | "b" => Some(Preference::B),
            _ => None,
        })
        .ok_or(ParseError::NoPreferenceToken)
}
