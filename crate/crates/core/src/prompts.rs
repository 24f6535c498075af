//! Rendering conversations into raw completion prompts.
//!
//! Layout produced by [`render`]:
//!
//! ```text
//! <open>system<close>{system prompt}<end>\n        (when present)
//! <open>documents<close>{document block}<end>\n    (when documents are used)
//! <open>{role}<close>{content}<end>\n              (every remaining turn)
//! <open>{generation role}<close>                   (the trigger suffix)
//! ```
//!
//! Each document renders as `[Document {doc_id}] {title}\n{text}`, the title
//! omitted when absent, and documents are separated by a blank line.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversation::{
    check_documents, validate_conversation, Conversation, ConversationError, Document, Role, Turn,
};
use crate::registry::{EndsWith, IntrinsicName};
use crate::segmenter::{tag_documents, tag_response, ContextIndex, SegmentError, TagScheme, TaggedText};

/// Generation role that triggers query rewriting.
pub const REWRITE_ROLE: &str = include_str!("../resources/rewrite_role.txt");
/// System instruction appended for hallucination detection.
pub const HALLUCINATION_INSTRUCTION: &str = include_str!("../resources/hallucination_instruction.txt");
/// System instruction appended for citation generation.
pub const CITATION_INSTRUCTION: &str = include_str!("../resources/citation_instruction.txt");
/// Default pairwise reranking judge prompt.
pub const RERANK_JUDGE_PROMPT: &str = include_str!("../resources/rerank_judge.txt");
/// System prompt used for answer generation in flows when the conversation
/// carries none of its own.
pub const RAG_INSTRUCTION: &str = include_str!("../resources/rag_instruction.txt");
/// Query expansion: question-from-answer prompt. `{answer}` is substituted.
pub const BACKWARD_GENERATION_PROMPT: &str = include_str!("../resources/backward_generation.txt");
/// Query expansion: synonymous rewrite prompt. `{query}` is substituted.
pub const SYNONYMIC_REWRITE_PROMPT: &str = include_str!("../resources/synonymic_rewrite.txt");

pub const CONTEXT_RELEVANCE_ROLE: &str = "context_relevance";
pub const ANSWERABILITY_ROLE: &str = "answerability";
pub const CERTAINTY_ROLE: &str = "certainty";
pub const ASSISTANT_ROLE: &str = "assistant";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("conversation must end with {expected} but ends with {actual}")]
    TerminalRoleMismatch { expected: &'static str, actual: Role },
    #[error("{intrinsic} requires documents")]
    MissingDocuments { intrinsic: IntrinsicName },
    #[error("{intrinsic} judges one document at a time, got {got}")]
    ExpectedSingleDocument { intrinsic: IntrinsicName, got: usize },
    #[error(transparent)]
    Conversation(ConversationError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error("invalid template: {0}")]
    InvalidTemplate(&'static str),
}

impl From<ConversationError> for PromptError {
    fn from(err: ConversationError) -> Self {
        match err {
            ConversationError::WrongTerminalRole { expected, actual } => {
                PromptError::TerminalRoleMismatch { expected, actual }
            }
            other => PromptError::Conversation(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub role_open: String,
    pub role_close: String,
    pub turn_end: String,
    pub turn_separator: String,
    /// Role name used for the document block.
    pub documents_role: String,
    /// Per-document pattern with `{doc_id}`, `{title}` and `{text}` slots.
    /// When a document has no title, `" {title}"` collapses to nothing.
    pub document_format: String,
    pub document_separator: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            role_open: "<|start_of_role|>".into(),
            role_close: "<|end_of_role|>".into(),
            turn_end: "<|end_of_text|>".into(),
            turn_separator: "\n".into(),
            documents_role: "documents".into(),
            document_format: "[Document {doc_id}] {title}\n{text}".into(),
            document_separator: "\n\n".into(),
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.role_open.is_empty() || self.role_close.is_empty() {
            return Err(PromptError::InvalidTemplate("role markers must be non-empty"));
        }
        if self.role_open == self.role_close {
            return Err(PromptError::InvalidTemplate("role markers must differ"));
        }
        Ok(())
    }

    /// The suffix that asks the model to continue in `role`.
    pub fn generation_suffix(&self, role: &str) -> String {
        format!("{}{}{}", self.role_open, role, self.role_close)
    }

    fn push_turn(&self, out: &mut String, role: &str, content: &str) {
        out.push_str(&self.role_open);
        out.push_str(role);
        out.push_str(&self.role_close);
        out.push_str(content);
        out.push_str(&self.turn_end);
        out.push_str(&self.turn_separator);
    }

    pub fn render_document(&self, doc_id: &str, title: Option<&str>, text: &str) -> String {
        let pattern = match title {
            Some(_) => self.document_format.clone(),
            None => self.document_format.replace(" {title}", "").replace("{title}", ""),
        };
        pattern
            .replace("{doc_id}", doc_id)
            .replace("{title}", title.unwrap_or(""))
            .replace("{text}", text)
    }

    fn document_block<'d>(&self, docs: impl Iterator<Item = (&'d str, Option<&'d str>, &'d str)>) -> String {
        docs.map(|(id, title, text)| self.render_document(id, title, text))
            .collect::<Vec<_>>()
            .join(&self.document_separator)
    }
}

/// What the prompt should make the model do.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trigger {
    Rewrite,
    Relevance,
    Answerability,
    Certainty,
    Hallucination,
    Citation,
    /// Pairwise passage judgment for reranking, asked about the final user
    /// query. `judge_prompt` defaults to [`RERANK_JUDGE_PROMPT`].
    Pairwise { judge_prompt: Option<String>, passage_a: Document, passage_b: Document },
    /// Plain assistant generation. `instruction` becomes the system turn when
    /// the conversation has none.
    Generate { instruction: Option<String> },
}

impl Trigger {
    pub fn intrinsic(&self) -> Option<IntrinsicName> {
        Some(match self {
            Trigger::Rewrite => IntrinsicName::Qr,
            Trigger::Relevance => IntrinsicName::Cr,
            Trigger::Answerability => IntrinsicName::Ad,
            Trigger::Certainty => IntrinsicName::Uq,
            Trigger::Hallucination => IntrinsicName::Hd,
            Trigger::Citation => IntrinsicName::Cg,
            Trigger::Pairwise { .. } => IntrinsicName::Prr,
            Trigger::Generate { .. } => return None,
        })
    }

    fn expected_end(&self) -> EndsWith {
        match self {
            Trigger::Hallucination | Trigger::Citation => EndsWith::AssistantResponse,
            Trigger::Certainty => EndsWith::Either,
            _ => EndsWith::UserQuery,
        }
    }
}

/// Tagging state a prompt was built with, needed to map model output ids
/// back onto text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptMeta {
    pub response: Option<TaggedText>,
    pub context: Option<ContextIndex>,
}

impl PromptMeta {
    pub fn n_response_sentences(&self) -> Option<usize> {
        self.response.as_ref().map(TaggedText::len)
    }

    pub fn n_context_sentences(&self) -> Option<usize> {
        self.context.as_ref().map(ContextIndex::len)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub generation_role: String,
    pub meta: PromptMeta,
}

/// Renders `conv` (plus `docs` where the trigger uses them) with the suffix
/// for `trigger`.
pub fn render(
    template: &PromptTemplate,
    conv: &Conversation,
    docs: Option<&[Document]>,
    trigger: &Trigger,
) -> Result<RenderedPrompt, PromptError> {
    template.validate()?;
    let conv = validate_conversation(conv.clone(), trigger.expected_end())?;
    let docs = docs.unwrap_or(&[]);
    check_documents(docs)?;
    let require_docs = |intrinsic| {
        if docs.is_empty() {
            Err(PromptError::MissingDocuments { intrinsic })
        } else {
            Ok(docs)
        }
    };

    match trigger {
        Trigger::Rewrite => Ok(plain(template, &conv, &[], REWRITE_ROLE, None)),
        Trigger::Relevance => {
            let docs = require_docs(IntrinsicName::Cr)?;
            if docs.len() != 1 {
                return Err(PromptError::ExpectedSingleDocument { intrinsic: IntrinsicName::Cr, got: docs.len() });
            }
            Ok(plain(template, &conv, docs, CONTEXT_RELEVANCE_ROLE, None))
        }
        Trigger::Answerability => {
            let docs = require_docs(IntrinsicName::Ad)?;
            Ok(plain(template, &conv, docs, ANSWERABILITY_ROLE, None))
        }
        Trigger::Certainty => Ok(plain(template, &conv, docs, CERTAINTY_ROLE, None)),
        Trigger::Hallucination => render_hd_with(template, &conv, require_docs(IntrinsicName::Hd)?),
        Trigger::Citation => render_cg_with(template, &conv, require_docs(IntrinsicName::Cg)?),
        Trigger::Pairwise { judge_prompt, passage_a, passage_b } => {
            let query = conv.last_user_query().unwrap_or_default();
            let content = pairwise_content(
                judge_prompt.as_deref().unwrap_or(RERANK_JUDGE_PROMPT),
                query,
                passage_a,
                passage_b,
            );
            let mut text = String::new();
            template.push_turn(&mut text, Role::User.as_str(), &content);
            text.push_str(&template.generation_suffix(ASSISTANT_ROLE));
            Ok(RenderedPrompt { text, generation_role: ASSISTANT_ROLE.into(), meta: PromptMeta::default() })
        }
        Trigger::Generate { instruction } => {
            Ok(plain(template, &conv, docs, ASSISTANT_ROLE, instruction.as_deref()))
        }
    }
}

/// User-turn content for one pairwise reranking judgment.
pub fn pairwise_content(judge_prompt: &str, query: &str, a: &Document, b: &Document) -> String {
    format!("{judge_prompt}\n\nquery: {query}\n\npassage A: {}\n\npassage B: {}", a.text, b.text)
}

fn plain(
    template: &PromptTemplate,
    conv: &Conversation,
    docs: &[Document],
    generation_role: &str,
    fallback_system: Option<&str>,
) -> RenderedPrompt {
    let block = (!docs.is_empty()).then(|| {
        template.document_block(docs.iter().map(|d| (d.doc_id.as_str(), d.title.as_deref(), d.text.as_str())))
    });
    let text = assemble(template, conv.turns(), block.as_deref(), None, fallback_system, generation_role);
    RenderedPrompt { text, generation_role: generation_role.into(), meta: PromptMeta::default() }
}

fn assemble(
    template: &PromptTemplate,
    turns: &[Turn],
    document_block: Option<&str>,
    appended_instruction: Option<&str>,
    fallback_system: Option<&str>,
    generation_role: &str,
) -> String {
    let mut out = String::new();
    let (system, rest) = match turns.split_first() {
        Some((first, rest)) if first.role == Role::System => (Some(first.content.as_str()), rest),
        _ => (fallback_system, turns),
    };
    if let Some(system) = system {
        template.push_turn(&mut out, Role::System.as_str(), system);
    }
    if let Some(block) = document_block {
        template.push_turn(&mut out, &template.documents_role, block);
    }
    for turn in rest {
        template.push_turn(&mut out, turn.role.as_str(), &turn.content);
    }
    if let Some(instruction) = appended_instruction {
        template.push_turn(&mut out, Role::System.as_str(), instruction);
    }
    out.push_str(&template.generation_suffix(generation_role));
    out
}

fn tagged_turns(conv: &Conversation, tagged: &TaggedText) -> Vec<Turn> {
    let mut turns = conv.turns().to_vec();
    if let Some(last) = turns.last_mut() {
        last.content = tagged.rendered.clone();
    }
    turns
}

fn render_hd_with(
    template: &PromptTemplate,
    conv: &Conversation,
    docs: &[Document],
) -> Result<RenderedPrompt, PromptError> {
    let tagged = tag_response(&conv.last().content, TagScheme::I)?;
    let block = template.document_block(docs.iter().map(|d| (d.doc_id.as_str(), d.title.as_deref(), d.text.as_str())));
    let text = assemble(
        template,
        &tagged_turns(conv, &tagged),
        Some(&block),
        Some(HALLUCINATION_INSTRUCTION),
        None,
        ASSISTANT_ROLE,
    );
    Ok(RenderedPrompt {
        text,
        generation_role: ASSISTANT_ROLE.into(),
        meta: PromptMeta { response: Some(tagged), context: None },
    })
}

fn render_cg_with(
    template: &PromptTemplate,
    conv: &Conversation,
    docs: &[Document],
) -> Result<RenderedPrompt, PromptError> {
    let tagged = tag_response(&conv.last().content, TagScheme::R)?;
    let index = tag_documents(docs)?;
    let block = template.document_block(
        index
            .documents
            .iter()
            .map(|d| (d.doc_id.as_str(), d.title.as_deref(), d.tagged.rendered.as_str())),
    );
    let text = assemble(
        template,
        &tagged_turns(conv, &tagged),
        Some(&block),
        Some(CITATION_INSTRUCTION),
        None,
        ASSISTANT_ROLE,
    );
    Ok(RenderedPrompt {
        text,
        generation_role: ASSISTANT_ROLE.into(),
        meta: PromptMeta { response: Some(tagged), context: Some(index) },
    })
}

/// Hallucination detection prompt: the final response tagged with `<iN>`,
/// the instruction appended as a trailing system turn.
pub fn render_hd(template: &PromptTemplate, conv: &Conversation, docs: &[Document]) -> Result<RenderedPrompt, PromptError> {
    render(template, conv, Some(docs), &Trigger::Hallucination)
}

/// Citation generation prompt: the final response tagged with `<rN>` and the
/// documents with globally numbered `<cN>`.
pub fn render_cg(template: &PromptTemplate, conv: &Conversation, docs: &[Document]) -> Result<RenderedPrompt, PromptError> {
    render(template, conv, Some(docs), &Trigger::Citation)
}

/// Substitutes `{name}` with `value` in one of the prompt constants.
pub fn fill(pattern: &str, name: &str, value: &str) -> String {
    pattern.replace(&format!("{{{name}}}"), value)
}

impl core::fmt::Display for RenderedPrompt {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&self.text)
    }
}

impl From<RenderedPrompt> for String {
    fn from(p: RenderedPrompt) -> Self {
        p.text
    }
}
