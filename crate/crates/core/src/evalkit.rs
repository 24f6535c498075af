//! Evaluation metrics: retrieval, classification, calibration, citation
//! quality, hallucination flags and the joint answerability-faithfulness
//! score (JAFS).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, CompletionRequest, GenerationParams};
use crate::conversation::{Conversation, Document};
use crate::intrinsics::{CitationReport, HallucinationReport, IntrinsicError, Intrinsics, HALLUCINATION_THRESHOLD};
use crate::parsing::{percent_to_decile, AnswerabilityLabel, CertaintyScore, ParseError, CERTAINTY_LEVELS};
use crate::pipeline::REFUSAL;
use crate::prompts::{render, Trigger};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("gold set is empty")]
    EmptyGold,
    #[error("no items to evaluate")]
    EmptyInput,
    #[error("paired inputs differ in length ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid value: {0}")]
    InvalidValue(String),
}

fn same_len(left: usize, right: usize) -> Result<(), MetricError> {
    if left == right {
        Ok(())
    } else {
        Err(MetricError::LengthMismatch { left, right })
    }
}

/// Fraction of `gold` found in the first `k` retrieved ids.
pub fn recall_at_k<T: Ord>(retrieved: &[T], gold: &BTreeSet<T>, k: usize) -> Result<f64, MetricError> {
    if gold.is_empty() {
        return Err(MetricError::EmptyGold);
    }
    let found: BTreeSet<&T> = retrieved.iter().take(k).filter(|id| gold.contains(*id)).collect();
    Ok(found.len() as f64 / gold.len() as f64)
}

/// NDCG@k with `gain / log2(rank + 1)` discounting; unlisted ids have gain 0.
pub fn ndcg_at_k<T: Ord>(ranked: &[T], gains: &BTreeMap<T, f64>, k: usize) -> f64 {
    let discount = |rank: usize| libm::log2(rank as f64 + 1.0);
    let mut seen = BTreeSet::new();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| seen.insert(*id))
        .map(|(i, id)| gains.get(id).copied().unwrap_or(0.0) / discount(i + 1))
        .sum();
    let mut ideal: Vec<f64> = gains.values().copied().filter(|g| *g > 0.0).collect();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap_or(core::cmp::Ordering::Equal));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, g)| g / discount(i + 1)).sum();
    if idcg > 0.0 {
        dcg / idcg
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics<L> {
    pub label: L,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of gold items with this label.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCell<L> {
    pub gold: L,
    pub predicted: L,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport<L> {
    pub classes: Vec<ClassMetrics<L>>,
    /// Support-weighted mean of the class F1 scores.
    pub weighted_f1: f64,
    pub confusion: Vec<ConfusionCell<L>>,
}

impl<L: PartialEq> ClassificationReport<L> {
    pub fn class(&self, label: &L) -> Option<&ClassMetrics<L>> {
        self.classes.iter().find(|c| &c.label == label)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-class precision, recall and F1 over every label seen in either list.
/// Undefined ratios (no predictions, no gold items) count as 0.
pub fn classification_report<L: Ord + Clone>(preds: &[L], golds: &[L]) -> Result<ClassificationReport<L>, MetricError> {
    same_len(preds.len(), golds.len())?;
    if preds.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut confusion: BTreeMap<(L, L), usize> = BTreeMap::new();
    for (p, g) in preds.iter().zip(golds) {
        *confusion.entry((g.clone(), p.clone())).or_default() += 1;
    }
    let labels: BTreeSet<L> = preds.iter().chain(golds).cloned().collect();
    let classes: Vec<ClassMetrics<L>> = labels
        .into_iter()
        .map(|label| {
            let tp = confusion.get(&(label.clone(), label.clone())).copied().unwrap_or(0);
            let predicted: usize = confusion.iter().filter(|((_, p), _)| *p == label).map(|(_, n)| n).sum();
            let support: usize = confusion.iter().filter(|((g, _), _)| *g == label).map(|(_, n)| n).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            ClassMetrics { label, precision, recall, f1: f1(precision, recall), support }
        })
        .collect();
    let weighted_f1 = classes.iter().map(|c| c.f1 * c.support as f64).sum::<f64>() / golds.len() as f64;
    Ok(ClassificationReport {
        classes,
        weighted_f1,
        confusion: confusion
            .into_iter()
            .map(|((gold, predicted), count)| ConfusionCell { gold, predicted, count })
            .collect(),
    })
}

/// Refusal phrases, matched against the lowercased response.
pub const REFUSAL_PATTERNS: [&str; 3] = ["i don't know", "i do not know", "cannot answer"];

/// Whether a response is an abstention.
pub fn idk_judge(response: &str) -> bool {
    let normalized = response.trim().to_lowercase().replace('\u{2019}', "'");
    let refusal = REFUSAL.to_lowercase();
    normalized == refusal
        || normalized.trim_end_matches(['.', '!']) == refusal
        || REFUSAL_PATTERNS.iter().any(|p| normalized.contains(p))
}

/// Joint answerability-faithfulness score of one item: 1 for a correct
/// abstention, the faithfulness score for an answered answerable query,
/// 0 otherwise.
pub fn jafs(abstained: bool, truth: AnswerabilityLabel, faithfulness: f64) -> f64 {
    match (abstained, truth) {
        (true, AnswerabilityLabel::Unanswerable) => 1.0,
        (false, AnswerabilityLabel::Answerable) => faithfulness,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JafsItem {
    pub abstained: bool,
    pub truth: AnswerabilityLabel,
    /// Only read for answered answerable items.
    pub faithfulness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JafsReport {
    pub scores: Vec<f64>,
    pub mean: f64,
}

pub fn jafs_report(items: &[JafsItem]) -> Result<JafsReport, MetricError> {
    if items.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let scores = items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let faithfulness = match (item.abstained, item.truth) {
                (false, AnswerabilityLabel::Answerable) => item
                    .faithfulness
                    .ok_or_else(|| MetricError::InvalidValue(alloc::format!("item {i}: faithfulness missing")))?,
                _ => item.faithfulness.unwrap_or(0.0),
            };
            if !(0.0..=1.0).contains(&faithfulness) {
                return Err(MetricError::InvalidValue(alloc::format!("item {i}: faithfulness {faithfulness} outside [0, 1]")));
            }
            Ok(jafs(item.abstained, item.truth, faithfulness))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(JafsReport { scores, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    /// Certainty level in percent.
    pub level: u8,
    pub count: usize,
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub bins: Vec<CalibrationBin>,
}

/// Expected calibration error over the ten certainty levels:
/// `Σ (n_bin / N) · |accuracy_bin − confidence_bin|`.
pub fn ece(scores: &[CertaintyScore], correct: &[bool]) -> Result<CalibrationReport, MetricError> {
    same_len(scores.len(), correct.len())?;
    if scores.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut counts = [0usize; 10];
    let mut hits = [0usize; 10];
    let mut confidence = [0.0f64; 10];
    for (score, &ok) in scores.iter().zip(correct) {
        let bin = usize::from(percent_to_decile(score.percent));
        counts[bin] += 1;
        hits[bin] += usize::from(ok);
        confidence[bin] += score.probability();
    }
    let n = scores.len() as f64;
    let mut total = 0.0;
    let bins = CERTAINTY_LEVELS
        .iter()
        .enumerate()
        .map(|(b, &level)| {
            if counts[b] == 0 {
                return CalibrationBin { level, count: 0, mean_confidence: None, accuracy: None };
            }
            let count = counts[b] as f64;
            let accuracy = hits[b] as f64 / count;
            let mean_confidence = confidence[b] / count;
            total += count / n * libm::fabs(accuracy - mean_confidence);
            CalibrationBin { level, count: counts[b], mean_confidence: Some(mean_confidence), accuracy: Some(accuracy) }
        })
        .collect();
    Ok(CalibrationReport { ece: total, bins })
}

/// Mean absolute difference between certainty levels on the 0..=9 scale.
pub fn mae_certainty(preds: &[u8], targets: &[u8]) -> Result<f64, MetricError> {
    same_len(preds.len(), targets.len())?;
    if preds.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let total: u32 = preds
        .iter()
        .zip(targets)
        .map(|(&p, &t)| u32::from(percent_to_decile(p).abs_diff(percent_to_decile(t))))
        .sum();
    Ok(f64::from(total) / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CitationLevel {
    /// Cited documents.
    Passage,
    /// Cited context sentence ids.
    Sentence,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CitationTarget {
    Sentence(usize),
    Doc(String),
}

/// (response sentence, target) pairs cited in a report at `level`.
pub fn citation_pairs(report: &CitationReport, level: CitationLevel) -> BTreeSet<(usize, CitationTarget)> {
    match level {
        CitationLevel::Passage => report
            .passage_level
            .iter()
            .flat_map(|(&r, docs)| docs.iter().map(move |d| (r, CitationTarget::Doc(d.clone()))))
            .collect(),
        CitationLevel::Sentence => report
            .links
            .iter()
            .flat_map(|l| l.c.iter().map(move |&c| (l.r, CitationTarget::Sentence(c))))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged precision/recall/F1 over (response sentence, target)
/// pairs. Two empty sets score 1.
pub fn prf_pairs<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> Prf {
    if pred.is_empty() && gold.is_empty() {
        return Prf { precision: 1.0, recall: 1.0, f1: 1.0 };
    }
    let tp = pred.intersection(gold).count();
    let precision = ratio(tp, pred.len());
    let recall = ratio(tp, gold.len());
    Prf { precision, recall, f1: f1(precision, recall) }
}

pub fn citation_prf(
    pred: &CitationReport,
    gold: &BTreeMap<usize, BTreeSet<CitationTarget>>,
    level: CitationLevel,
) -> Prf {
    let gold_pairs: BTreeSet<(usize, CitationTarget)> = gold
        .iter()
        .flat_map(|(&r, targets)| targets.iter().map(move |t| (r, t.clone())))
        .collect();
    prf_pairs(&citation_pairs(pred, level), &gold_pairs)
}

/// Recomputes the response-level flag from the verdict labels.
pub fn hallucination_response_flag(report: &HallucinationReport) -> bool {
    report
        .verdicts
        .iter()
        .filter_map(|v| crate::intrinsics::faithfulness_score(v.f))
        .any(|s| s < HALLUCINATION_THRESHOLD)
}

/// Source of the faithfulness term in JAFS.
pub trait FaithfulnessJudge {
    /// Faithfulness in `[0, 1]` of the final assistant turn of `conv` with
    /// respect to `docs`.
    fn faithfulness(&self, conv: &Conversation, docs: &[Document]) -> Result<f64, IntrinsicError>;
}

/// Mean per-sentence score from hallucination detection. A response whose
/// sentences make no claims scores 1.
pub struct HallucinationJudge<'a, B>(pub &'a Intrinsics<B>);

impl<B: Backend> FaithfulnessJudge for HallucinationJudge<'_, B> {
    fn faithfulness(&self, conv: &Conversation, docs: &[Document]) -> Result<f64, IntrinsicError> {
        Ok(self.0.detect_hallucinations(conv, docs)?.mean_faithfulness().unwrap_or(1.0))
    }
}

/// Instruction for [`BackendJudge`].
pub const FAITHFULNESS_JUDGE_INSTRUCTION: &str = "Rate how faithful the last assistant response is to the provided documents. Reply with a single number between 0 and 1, where 1 means every claim is supported by the documents.";

/// Asks an external model for a number in `[0, 1]`.
pub struct BackendJudge<'a, B> {
    pub intrinsics: &'a Intrinsics<B>,
    pub params: GenerationParams,
}

impl<B: Backend> FaithfulnessJudge for BackendJudge<'_, B> {
    fn faithfulness(&self, conv: &Conversation, docs: &[Document]) -> Result<f64, IntrinsicError> {
        let judged = conv.push(crate::conversation::Turn::user(FAITHFULNESS_JUDGE_INSTRUCTION))?;
        let prompt = render(&self.intrinsics.template, &judged, Some(docs), &Trigger::Generate { instruction: None })?;
        let req = CompletionRequest::new(prompt.text, self.params.clone(), "faithfulness-judge");
        let raw = self.intrinsics.backend().generate(&req)?.text;
        parse_unit_interval(&raw).ok_or(IntrinsicError::Parse {
            error: ParseError::MalformedOutput("expected a number in [0, 1]".into()),
            raw,
        })
    }
}

fn parse_unit_interval(text: &str) -> Option<f64> {
    let token = text
        .split(|c: char| !(c.is_ascii_digit() || c == '.'))
        .find(|t| !t.is_empty() && t.chars().any(|c| c.is_ascii_digit()))?;
    let value: f64 = token.trim_end_matches('.').parse().ok()?;
    (0.0..=1.0).contains(&value).then_some(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parsing::{CitationLink, Faithfulness, SentenceVerdict};
    use crate::segmenter::SentenceSpan;
    use alloc::vec;

    fn set(items: &[&'static str]) -> BTreeSet<&'static str> {
        items.iter().copied().collect()
    }

    #[test]
    fn recall_cases() {
        assert_eq!(recall_at_k(&["d1", "d3"], &set(&["d1", "d2"]), 2), Ok(0.5));
        assert_eq!(recall_at_k(&["d2", "d1"], &set(&["d1", "d2"]), 2), Ok(1.0));
        assert_eq!(recall_at_k(&["d1"], &set(&[]), 1), Err(MetricError::EmptyGold));
    }

    #[test]
    fn ndcg_cases() {
        let gains: BTreeMap<_, _> = [("r", 1.0)].into_iter().collect();
        assert!((ndcg_at_k(&["r"], &gains, 10) - 1.0).abs() < 1e-12);
        let v = ndcg_at_k(&["x", "r"], &gains, 10);
        assert!((v - 1.0 / libm::log2(3.0)).abs() < 1e-9);
        assert!((v - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&["x", "y"], &gains, 10), 0.0);
    }

    #[test]
    fn classification_hand_case() {
        use AnswerabilityLabel::*;
        let r = classification_report(&[Answerable, Answerable, Unanswerable], &[Answerable, Unanswerable, Unanswerable])
            .unwrap();
        let a = r.class(&Answerable).unwrap();
        assert_eq!((a.precision, a.recall), (0.5, 1.0));
        assert!((a.f1 - 2.0 / 3.0).abs() < 1e-12);
        let u = r.class(&Unanswerable).unwrap();
        assert_eq!((u.precision, u.recall), (1.0, 0.5));
        assert!((u.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.weighted_f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            classification_report(&[Answerable], &[]).unwrap_err(),
            MetricError::LengthMismatch { left: 1, right: 0 }
        );
    }

    #[test]
    fn perfect_classification() {
        let r = classification_report(&["a", "b", "a"], &["a", "b", "a"]).unwrap();
        assert!(r.classes.iter().all(|c| c.precision == 1.0 && c.recall == 1.0 && c.f1 == 1.0));
        assert_eq!(r.weighted_f1, 1.0);
    }

    #[test]
    fn idk() {
        assert!(idk_judge("I don't know the answer"));
        assert!(idk_judge("I DO NOT KNOW"));
        assert!(idk_judge("  Sorry, I cannot answer that.  "));
        assert!(idk_judge("I don\u{2019}t know."));
        assert!(!idk_judge("Paris is the capital."));
    }

    #[test]
    fn jafs_cases() {
        use AnswerabilityLabel::*;
        assert_eq!(jafs(true, Unanswerable, 0.3), 1.0);
        assert_eq!(jafs(false, Answerable, 0.8), 0.8);
        assert_eq!(jafs(false, Unanswerable, 0.9), 0.0);
        assert_eq!(jafs(true, Answerable, 0.9), 0.0);
        let report = jafs_report(&[
            JafsItem { abstained: true, truth: Unanswerable, faithfulness: None },
            JafsItem { abstained: false, truth: Answerable, faithfulness: Some(0.5) },
        ])
        .unwrap();
        assert_eq!(report.mean, 0.75);
        assert!(jafs_report(&[JafsItem { abstained: false, truth: Answerable, faithfulness: None }]).is_err());
        assert!(jafs_report(&[JafsItem { abstained: false, truth: Answerable, faithfulness: Some(1.5) }]).is_err());
    }

    fn scores(levels: &[u8]) -> Vec<CertaintyScore> {
        levels.iter().map(|&l| CertaintyScore::from_level(l).unwrap()).collect()
    }

    #[test]
    fn ece_cases() {
        let s = scores(&[75; 10]);
        let correct: Vec<bool> = (0..10).map(|i| i < 6).collect();
        let r = ece(&s, &correct).unwrap();
        assert!((r.ece - 0.15).abs() < 1e-12);
        assert_eq!(r.bins.len(), 10);
        assert_eq!(r.bins[7].count, 10);

        // 20 items at 5% with 1 correct, 4 at 75% with 3 correct
        let mut s = scores(&[5; 20]);
        s.extend(scores(&[75; 4]));
        let mut correct = vec![false; 24];
        correct[0] = true;
        correct[20..23].iter_mut().for_each(|c| *c = true);
        assert!(ece(&s, &correct).unwrap().ece.abs() < 1e-12);
        assert_eq!(ece(&[], &[]).unwrap_err(), MetricError::EmptyInput);
    }

    #[test]
    fn mae_cases() {
        assert_eq!(mae_certainty(&[85, 5], &[85, 5]), Ok(0.0));
        assert_eq!(mae_certainty(&[85], &[75]), Ok(1.0));
        assert!(mae_certainty(&[85], &[]).is_err());
    }

    fn report(passage_level: &[(usize, &[&str])], links: Vec<CitationLink>) -> CitationReport {
        CitationReport {
            links,
            citations: vec![],
            passage_level: passage_level
                .iter()
                .map(|(r, ds)| (*r, ds.iter().map(|d| String::from(*d)).collect()))
                .collect(),
        }
    }

    #[test]
    fn citation_cases() {
        let pred = report(&[(0, &["d1"])], vec![]);
        let gold: BTreeMap<_, _> =
            [(0, [CitationTarget::Doc("d1".into()), CitationTarget::Doc("d2".into())].into_iter().collect())].into_iter().collect();
        let prf = citation_prf(&pred, &gold, CitationLevel::Passage);
        assert_eq!((prf.precision, prf.recall), (1.0, 0.5));
        assert!((prf.f1 - 2.0 / 3.0).abs() < 1e-12);

        let empty = report(&[], vec![]);
        let prf = citation_prf(&empty, &gold, CitationLevel::Passage);
        assert_eq!((prf.precision, prf.recall, prf.f1), (0.0, 0.0, 0.0));

        let exact = report(&[], vec![CitationLink { r: 0, c: vec![1, 2] }]);
        let gold: BTreeMap<_, _> =
            [(0, [CitationTarget::Sentence(1), CitationTarget::Sentence(2)].into_iter().collect())].into_iter().collect();
        let prf = citation_prf(&exact, &gold, CitationLevel::Sentence);
        assert_eq!((prf.precision, prf.recall, prf.f1), (1.0, 1.0, 1.0));
    }

    fn hd(labels: &[Faithfulness]) -> HallucinationReport {
        let verdicts = labels
            .iter()
            .enumerate()
            .map(|(i, &f)| SentenceVerdict { i, f, r: String::new() })
            .collect();
        let spans = (0..labels.len()).map(|i| SentenceSpan { index: i, start: i, end: i + 1 }).collect();
        HallucinationReport::from_verdicts(verdicts, spans)
    }

    #[test]
    fn hallucination_flag() {
        use Faithfulness::*;
        for labels in [&[Faithful, Faithful][..], &[Faithful, Unfaithful], &[NotApplicable, NotApplicable], &[Partial]] {
            let r = hd(labels);
            assert_eq!(hallucination_response_flag(&r), r.response_flagged);
        }
        assert!(!hd(&[Faithful, Faithful]).response_flagged);
        assert!(hd(&[Faithful, Unfaithful]).response_flagged);
        assert!(!hd(&[NotApplicable, NotApplicable]).response_flagged);
        assert!(!hd(&[Faithful, NotApplicable]).response_flagged);
    }

    #[test]
    fn unit_interval_parsing() {
        assert_eq!(parse_unit_interval("0.75"), Some(0.75));
        assert_eq!(parse_unit_interval("Score: 1."), Some(1.0));
        assert_eq!(parse_unit_interval("7"), None);
        assert_eq!(parse_unit_interval("none"), None);
    }
}
