//! Rule-based sentence splitting with byte-exact spans, and the `<iN>`,
//! `<rN>`, `<cN>` sentence tagging used by hallucination detection and
//! citation generation.
//!
//! A sentence boundary is placed after a run of `.`, `!` or `?` (plus any
//! closing quotes or brackets that immediately follow it) when the run is
//! followed by whitespace and then an uppercase letter, an opening quote or
//! bracket, or a digit. A lone `.` ending one of [`ABBREVIATIONS`] never
//! ends a sentence. Decimals such as `3.14` never split because the period
//! is not followed by whitespace.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;
use core::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversation::Document;

/// Tokens ending in `.` that do not terminate a sentence. Matched
/// case-sensitively against the whitespace-delimited word.
pub const ABBREVIATIONS: [&str; 10] =
    ["Mr.", "Mrs.", "Dr.", "e.g.", "i.e.", "etc.", "vs.", "Fig.", "No.", "U.S."];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SegmentError {
    #[error("response is empty")]
    EmptyResponse,
    #[error("document list is empty")]
    EmptyDocumentList,
    #[error("document `{doc_id}` has no text")]
    EmptyDocumentText { doc_id: String },
    #[error("sentence id {id} out of range (valid ids: {}..{})", valid.start, valid.end)]
    IdOutOfRange { id: usize, valid: Range<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub index: usize,
    pub start: usize,
    pub end: usize,
}

impl SentenceSpan {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn slice<'t>(&self, text: &'t str) -> &'t str {
        &text[self.start..self.end]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagScheme {
    /// Response sentences for hallucination detection.
    I,
    /// Response sentences for citation generation.
    R,
    /// Context (document) sentences for citation generation.
    C,
}

impl TagScheme {
    pub fn letter(self) -> char {
        match self {
            TagScheme::I => 'i',
            TagScheme::R => 'r',
            TagScheme::C => 'c',
        }
    }

    pub fn tag(self, id: usize) -> String {
        format!("<{}{}> ", self.letter(), id)
    }
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '}' | '\u{201D}' | '\u{2019}' | '\u{00BB}')
}

fn is_opener(c: char) -> bool {
    matches!(c, '"' | '\'' | '(' | '[' | '\u{201C}' | '\u{2018}' | '\u{00AB}')
}

fn starts_sentence(c: char) -> bool {
    c.is_uppercase() || c.is_ascii_digit() || is_opener(c)
}

/// Whether the word ending at byte `dot_end` (exclusive, the `.` included)
/// is a listed abbreviation.
fn ends_with_abbreviation(text: &str, sentence_start: usize, dot_end: usize) -> bool {
    let head = &text[sentence_start..dot_end];
    let word_start = head
        .char_indices()
        .rev()
        .find(|(_, c)| c.is_whitespace())
        .map(|(i, c)| i + c.len_utf8())
        .unwrap_or(0);
    let word = head[word_start..].trim_start_matches(is_opener);
    ABBREVIATIONS.contains(&word)
}

/// Splits `text` into sentence spans (byte offsets, end exclusive).
///
/// Spans never include leading or trailing whitespace and together cover
/// every non-whitespace byte of the input.
pub fn split_sentences(text: &str) -> Vec<SentenceSpan> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut ranges: Vec<Range<usize>> = Vec::new();
    let mut start: Option<usize> = None;
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        let sentence_start = match start {
            Some(s) => s,
            None if c.is_whitespace() => {
                i += 1;
                continue;
            }
            None => {
                start = Some(pos);
                pos
            }
        };
        if !is_terminator(c) {
            i += 1;
            continue;
        }

        let mut j = i;
        while j + 1 < chars.len() && is_terminator(chars[j + 1].1) {
            j += 1;
        }
        let lone_period = j == i && c == '.';
        while j + 1 < chars.len() && is_closer(chars[j + 1].1) {
            j += 1;
        }
        let end = chars[j].0 + chars[j].1.len_utf8();

        let mut k = j + 1;
        while k < chars.len() && chars[k].1.is_whitespace() {
            k += 1;
        }
        let boundary = k > j + 1
            && k < chars.len()
            && starts_sentence(chars[k].1)
            && !(lone_period && ends_with_abbreviation(text, sentence_start, pos + 1));
        if boundary {
            ranges.push(sentence_start..end);
            start = None;
            i = k;
        } else {
            i = j + 1;
        }
    }
    if let Some(s) = start {
        let end = text.trim_end().len();
        if end > s {
            ranges.push(s..end);
        }
    }
    ranges
        .into_iter()
        .enumerate()
        .map(|(index, r)| SentenceSpan { index, start: r.start, end: r.end })
        .collect()
}

/// Text with a sentence tag inserted before every sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedText {
    pub original: String,
    pub spans: Vec<SentenceSpan>,
    pub scheme: TagScheme,
    /// Id carried by the first sentence's tag. Zero except for documents
    /// after the first in a [`ContextIndex`].
    pub first_id: usize,
    pub rendered: String,
}

impl TaggedText {
    fn build(original: &str, scheme: TagScheme, first_id: usize) -> Self {
        let spans = split_sentences(original);
        let mut rendered = String::with_capacity(original.len() + spans.len() * 6);
        let mut cursor = 0;
        for span in &spans {
            rendered.push_str(&original[cursor..span.start]);
            let _ = write!(rendered, "<{}{}> ", scheme.letter(), first_id + span.index);
            cursor = span.start;
        }
        rendered.push_str(&original[cursor..]);
        TaggedText { original: original.into(), spans, scheme, first_id, rendered }
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Valid tag ids for this text.
    pub fn id_range(&self) -> Range<usize> {
        self.first_id..self.first_id + self.spans.len()
    }

    pub fn sentence(&self, local_index: usize) -> Option<&str> {
        self.spans.get(local_index).map(|s| s.slice(&self.original))
    }

    /// Spans for tag ids, in input order.
    pub fn spans_for_ids(&self, ids: &[usize]) -> Result<Vec<SentenceSpan>, SegmentError> {
        ids.iter()
            .map(|&id| {
                let range = self.id_range();
                if range.contains(&id) {
                    Ok(self.spans[id - self.first_id])
                } else {
                    Err(SegmentError::IdOutOfRange { id, valid: range })
                }
            })
            .collect()
    }
}

/// Removes the tags of `scheme`, numbered consecutively from `first_id`,
/// from a rendered text.
///
/// Only the next expected tag is ever removed, so tag-like text that happens
/// to appear inside a sentence is left alone.
pub fn strip_tags(rendered: &str, scheme: TagScheme, first_id: usize) -> String {
    let mut out = String::with_capacity(rendered.len());
    let mut next = first_id;
    let mut rest = rendered;
    loop {
        let tag = scheme.tag(next);
        match rest.find(tag.as_str()) {
            Some(at) => {
                out.push_str(&rest[..at]);
                rest = &rest[at + tag.len()..];
                next += 1;
            }
            None => {
                out.push_str(rest);
                return out;
            }
        }
    }
}

/// Tags a response with `<iN>` or `<rN>` ids starting from zero.
pub fn tag_response(response: &str, scheme: TagScheme) -> Result<TaggedText, SegmentError> {
    let tagged = TaggedText::build(response, scheme, 0);
    if tagged.is_empty() {
        return Err(SegmentError::EmptyResponse);
    }
    Ok(tagged)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedDocument {
    pub doc_id: String,
    pub title: Option<String>,
    pub tagged: TaggedText,
}

/// Documents tagged with `<cN>` ids that run on across document
/// boundaries, plus the global id → (document ordinal, span) map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextIndex {
    pub documents: Vec<TaggedDocument>,
    entries: Vec<(usize, SentenceSpan)>,
}

impl ContextIndex {
    /// Total number of context sentences.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: usize) -> Option<(usize, SentenceSpan)> {
        self.entries.get(id).copied()
    }

    pub fn doc_id_of(&self, id: usize) -> Option<&str> {
        self.entry(id).map(|(doc, _)| self.documents[doc].doc_id.as_str())
    }

    /// `(document ordinal, span)` per id, in input order.
    pub fn spans_for_ids(&self, ids: &[usize]) -> Result<Vec<(usize, SentenceSpan)>, SegmentError> {
        ids.iter()
            .map(|&id| {
                self.entry(id)
                    .ok_or(SegmentError::IdOutOfRange { id, valid: 0..self.entries.len() })
            })
            .collect()
    }
}

pub fn tag_documents(docs: &[Document]) -> Result<ContextIndex, SegmentError> {
    if docs.is_empty() {
        return Err(SegmentError::EmptyDocumentList);
    }
    let mut documents = Vec::with_capacity(docs.len());
    let mut entries = Vec::new();
    for (ordinal, doc) in docs.iter().enumerate() {
        let tagged = TaggedText::build(&doc.text, TagScheme::C, entries.len());
        if tagged.is_empty() {
            return Err(SegmentError::EmptyDocumentText { doc_id: doc.doc_id.clone() });
        }
        entries.extend(tagged.spans.iter().map(|span| (ordinal, *span)));
        documents.push(TaggedDocument { doc_id: doc.doc_id.clone(), title: doc.title.clone(), tagged });
    }
    Ok(ContextIndex { documents, entries })
}
