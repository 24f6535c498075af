//! Model-agnostic RAG intrinsics.
//!
//! Each intrinsic (query rewrite, query expansion, context relevance,
//! answerability, passage reranking, certainty, hallucination detection,
//! citation generation) is a composition of three pure pieces: a prompt
//! renderer, a call through the [`backend::Backend`] trait, and a strict
//! parser for the completion. On top of those sit the retriever and the
//! composite RAG flows, plus the metrics used to evaluate them.
//!
//! The crate is `no_std` and only needs `alloc`. IO, HTTP and the CLI live in
//! the companion `rag-intrinsics` crate.
#![no_std]
#![deny(rust_2018_idioms)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod backend;
pub mod conversation;
pub mod digest;
pub mod evalkit;
pub mod intrinsics;
pub mod parsing;
pub mod pipeline;
pub mod prompts;
pub mod registry;
pub mod segmenter;

pub use backend::{
    Backend, BackendError, CompletionRequest, CompletionResponse, FinishReason, FnBackend,
    GenerationParams,
};
pub use conversation::{
    validate_conversation, Conversation, ConversationError, Document, Role, Turn,
};
pub use intrinsics::{IntrinsicError, Intrinsics};
pub use registry::{registry_lookup, EndsWith, IntrinsicName, IntrinsicSignature};
