//! Conversations, turns and grounding documents.
//!
//! Wire shape: a conversation is a JSON array of `{"role", "content"}`
//! objects; a document is `{"doc_id", "title", "text"}` with `title`
//! optional and `doc_id` optional on input (see [`normalize_documents`]).

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::EndsWith;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConversationError {
    #[error("conversation has no turns")]
    EmptyConversation,
    #[error("turn {index} has empty content")]
    EmptyTurn { index: usize },
    #[error("conversation must end with {expected} but ends with {actual}")]
    WrongTerminalRole { expected: &'static str, actual: Role },
    #[error("turns {index} and {} both have role {role}", index + 1)]
    ConsecutiveSameRole { index: usize, role: Role },
    #[error("system turn at position {index}; only a single leading system turn is allowed")]
    MisplacedSystemTurn { index: usize },
    #[error("document `{doc_id}` has empty text")]
    EmptyDocumentText { doc_id: String },
    #[error("duplicate doc_id `{doc_id}`")]
    DuplicateDocId { doc_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

impl Turn {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Turn { role, content: content.into() }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Turn::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Turn::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Turn::new(Role::Assistant, content)
    }
}

/// A structurally valid, non-empty list of turns.
///
/// Holds at most one system turn, at the front, and no two adjacent turns
/// after it share a role. Construction goes through [`Conversation::new`], so
/// every value in circulation satisfies those invariants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Turn>", into = "Vec<Turn>")]
pub struct Conversation {
    turns: Vec<Turn>,
}

impl Conversation {
    pub fn new(turns: Vec<Turn>) -> Result<Self, ConversationError> {
        check_turns(&turns)?;
        Ok(Conversation { turns })
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn last(&self) -> &Turn {
        // non-empty by construction
        self.turns.last().expect("conversation is non-empty")
    }

    pub fn system_prompt(&self) -> Option<&str> {
        self.turns
            .first()
            .filter(|t| t.role == Role::System)
            .map(|t| t.content.as_str())
    }

    /// Content of the last user turn, if any.
    pub fn last_user_query(&self) -> Option<&str> {
        self.turns
            .iter()
            .rev()
            .find(|t| t.role == Role::User)
            .map(|t| t.content.as_str())
    }

    /// Returns a copy with the final turn's content replaced.
    pub fn with_last_content(&self, content: impl Into<String>) -> Result<Self, ConversationError> {
        let mut turns = self.turns.clone();
        if let Some(last) = turns.last_mut() {
            last.content = content.into();
        }
        Conversation::new(turns)
    }

    /// Appends a turn, re-checking the invariants.
    pub fn push(&self, turn: Turn) -> Result<Self, ConversationError> {
        let mut turns = self.turns.clone();
        turns.push(turn);
        Conversation::new(turns)
    }

    pub fn into_turns(self) -> Vec<Turn> {
        self.turns
    }
}

impl TryFrom<Vec<Turn>> for Conversation {
    type Error = ConversationError;

    fn try_from(turns: Vec<Turn>) -> Result<Self, Self::Error> {
        Conversation::new(turns)
    }
}

impl From<Conversation> for Vec<Turn> {
    fn from(conv: Conversation) -> Self {
        conv.turns
    }
}

fn check_turns(turns: &[Turn]) -> Result<(), ConversationError> {
    if turns.is_empty() {
        return Err(ConversationError::EmptyConversation);
    }
    for (index, turn) in turns.iter().enumerate() {
        if turn.content.trim().is_empty() {
            return Err(ConversationError::EmptyTurn { index });
        }
        if turn.role == Role::System && index > 0 {
            return Err(ConversationError::MisplacedSystemTurn { index });
        }
    }
    for (index, pair) in turns.windows(2).enumerate() {
        if pair[0].role == pair[1].role {
            return Err(ConversationError::ConsecutiveSameRole { index, role: pair[0].role });
        }
    }
    Ok(())
}

fn ends_with_label(expected: EndsWith) -> &'static str {
    match expected {
        EndsWith::UserQuery => "a user query",
        EndsWith::AssistantResponse => "an assistant response",
        EndsWith::Either => "a user or assistant turn",
    }
}

/// Checks the structural invariants and the terminal role.
///
/// Returns the conversation unchanged on success, so the call composes and is
/// idempotent.
pub fn validate_conversation(
    conv: Conversation,
    expected_end: EndsWith,
) -> Result<Conversation, ConversationError> {
    check_turns(&conv.turns)?;
    let actual = conv.last().role;
    let ok = match expected_end {
        EndsWith::UserQuery => actual == Role::User,
        EndsWith::AssistantResponse => actual == Role::Assistant,
        EndsWith::Either => actual != Role::System,
    };
    if ok {
        Ok(conv)
    } else {
        Err(ConversationError::WrongTerminalRole { expected: ends_with_label(expected_end), actual })
    }
}

/// A grounding passage.
///
/// On input `doc_id` may be omitted; [`normalize_documents`] assigns
/// `doc_<index>` to such entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(default)]
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub text: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Document { doc_id: doc_id.into(), title: None, text: text.into() }
    }

    pub fn with_title(mut self, title: impl Into<String>) -> Self {
        self.title = Some(title.into());
        self
    }
}

/// Fills in missing ids and checks that every text is non-empty and every
/// id unique.
pub fn normalize_documents(mut docs: Vec<Document>) -> Result<Vec<Document>, ConversationError> {
    for (index, doc) in docs.iter_mut().enumerate() {
        if doc.doc_id.is_empty() {
            doc.doc_id = format!("doc_{index}");
        }
    }
    check_documents(&docs)?;
    Ok(docs)
}

pub fn check_documents(docs: &[Document]) -> Result<(), ConversationError> {
    let mut seen = BTreeSet::new();
    for doc in docs {
        if doc.text.trim().is_empty() {
            return Err(ConversationError::EmptyDocumentText { doc_id: doc.doc_id.clone() });
        }
        if !seen.insert(doc.doc_id.as_str()) {
            return Err(ConversationError::DuplicateDocId { doc_id: doc.doc_id.clone() });
        }
    }
    Ok(())
}
