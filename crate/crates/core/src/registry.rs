//! The eight intrinsics and their expected inputs.

use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum IntrinsicName {
    /// Query rewrite.
    Qr,
    /// Query expansion.
    Qe,
    /// Context relevance.
    Cr,
    /// Answerability determination.
    Ad,
    /// Passage reranking.
    Prr,
    /// Uncertainty quantification (certainty score).
    Uq,
    /// Hallucination detection.
    Hd,
    /// Citation generation.
    Cg,
}

impl IntrinsicName {
    pub const ALL: [IntrinsicName; 8] = [
        IntrinsicName::Qr,
        IntrinsicName::Qe,
        IntrinsicName::Cr,
        IntrinsicName::Ad,
        IntrinsicName::Prr,
        IntrinsicName::Uq,
        IntrinsicName::Hd,
        IntrinsicName::Cg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IntrinsicName::Qr => "QR",
            IntrinsicName::Qe => "QE",
            IntrinsicName::Cr => "CR",
            IntrinsicName::Ad => "AD",
            IntrinsicName::Prr => "PRR",
            IntrinsicName::Uq => "UQ",
            IntrinsicName::Hd => "HD",
            IntrinsicName::Cg => "CG",
        }
    }
}

impl fmt::Display for IntrinsicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown intrinsic `{0}` (expected one of QR, QE, CR, AD, PRR, UQ, HD, CG)")]
pub struct UnknownIntrinsic(pub alloc::string::String);

impl FromStr for IntrinsicName {
    type Err = UnknownIntrinsic;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        IntrinsicName::ALL
            .into_iter()
            .find(|name| name.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| UnknownIntrinsic(s.into()))
    }
}

/// How many grounding passages an intrinsic takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassageNeed {
    None,
    One,
    Many,
    Optional,
}

/// Which role the conversation must end with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndsWith {
    UserQuery,
    AssistantResponse,
    Either,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PreRetrieval,
    PreGeneration,
    PostGeneration,
    /// Usable before or after generation (certainty scoring).
    PreOrPost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntrinsicSignature {
    pub name: IntrinsicName,
    pub needs_passages: PassageNeed,
    pub ends_with: EndsWith,
    pub stage: Stage,
}

const fn sig(
    name: IntrinsicName,
    needs_passages: PassageNeed,
    ends_with: EndsWith,
    stage: Stage,
) -> IntrinsicSignature {
    IntrinsicSignature { name, needs_passages, ends_with, stage }
}

pub const REGISTRY: [IntrinsicSignature; 8] = [
    sig(IntrinsicName::Qr, PassageNeed::None, EndsWith::UserQuery, Stage::PreRetrieval),
    sig(IntrinsicName::Qe, PassageNeed::None, EndsWith::UserQuery, Stage::PreRetrieval),
    sig(IntrinsicName::Cr, PassageNeed::One, EndsWith::UserQuery, Stage::PreGeneration),
    sig(IntrinsicName::Ad, PassageNeed::Many, EndsWith::UserQuery, Stage::PreGeneration),
    sig(IntrinsicName::Prr, PassageNeed::Many, EndsWith::UserQuery, Stage::PreGeneration),
    sig(IntrinsicName::Uq, PassageNeed::Optional, EndsWith::Either, Stage::PreOrPost),
    sig(IntrinsicName::Hd, PassageNeed::Many, EndsWith::AssistantResponse, Stage::PostGeneration),
    sig(IntrinsicName::Cg, PassageNeed::Many, EndsWith::AssistantResponse, Stage::PostGeneration),
];

pub fn registry_lookup(name: IntrinsicName) -> IntrinsicSignature {
    REGISTRY[name as usize]
}

/// String-keyed lookup, for callers holding a name from a file or flag.
pub fn registry_lookup_str(name: &str) -> Result<IntrinsicSignature, UnknownIntrinsic> {
    name.parse().map(registry_lookup)
}
