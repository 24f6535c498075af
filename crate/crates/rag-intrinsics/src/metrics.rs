//! Metrics over a run report joined with a gold file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rag_intrinsics_core::evalkit::{
    classification_report, ece, idk_judge, jafs_report, mae_certainty, ndcg_at_k, prf_pairs, recall_at_k,
    CalibrationReport, ClassificationReport, JafsItem, MetricError, Prf,
};
use rag_intrinsics_core::parsing::{AnswerabilityLabel, CertaintyScore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{GoldRecord, RunRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Answerability,
    Jafs,
    Recall,
    Ndcg,
    Ece,
    Mae,
    Citation,
}

impl Metric {
    pub const ALL: [Metric; 7] =
        [Metric::Answerability, Metric::Jafs, Metric::Recall, Metric::Ndcg, Metric::Ece, Metric::Mae, Metric::Citation];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Answerability => "answerability",
            Metric::Jafs => "jafs",
            Metric::Recall => "recall",
            Metric::Ndcg => "ndcg",
            Metric::Ece => "ece",
            Metric::Mae => "mae",
            Metric::Citation => "citation",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        Metric::ALL.into_iter().find(|m| m.as_str() == s).ok_or(EvalError::UnknownMetric(s))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("unknown metric `{0}` (expected answerability, jafs, recall, ndcg, ece, mae, citation)")]
    UnknownMetric(String),
    #[error("no gold record for `{0}`")]
    MissingGold(String),
    #[error("{metric} needs field `{field}`, missing for `{id}`")]
    MissingField { metric: &'static str, field: &'static str, id: String },
    #[error("{metric}: {source}")]
    Metric { metric: &'static str, source: MetricError },
}

fn metric_err(metric: &'static str) -> impl Fn(MetricError) -> EvalError {
    move |source| EvalError::Metric { metric, source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingSummary {
    pub k: usize,
    pub mean: f64,
    pub evaluated: usize,
    /// Items whose gold set is empty.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JafsSummary {
    pub mean: f64,
    pub items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub items: usize,
    /// Records that carry an error and were left out.
    pub failed_runs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answerability: Option<ClassificationReport<AnswerabilityLabel>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jafs: Option<JafsSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<RankingSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ndcg: Option<RankingSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ece: Option<CalibrationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub citation: Option<Prf>,
}

struct Joined<'a> {
    run: &'a RunRecord,
    gold: &'a GoldRecord,
    abstained: bool,
}

fn missing(metric: &'static str, field: &'static str, id: &str) -> EvalError {
    EvalError::MissingField { metric, field, id: id.into() }
}

pub fn evaluate(runs: &[RunRecord], gold: &[GoldRecord], metrics: &BTreeSet<Metric>, k: usize) -> Result<MetricsReport, EvalError> {
    let by_id: BTreeMap<&str, &GoldRecord> = gold.iter().map(|g| (g.id.as_str(), g)).collect();
    let mut items = Vec::new();
    let mut failed_runs = 0;
    for run in runs {
        let gold = by_id.get(run.id.as_str()).ok_or_else(|| EvalError::MissingGold(run.id.clone()))?;
        match (&run.error, &run.final_response) {
            (None, Some(response)) => items.push(Joined { run, gold, abstained: idk_judge(response) }),
            _ => failed_runs += 1,
        }
    }
    let mut report = MetricsReport {
        items: items.len(),
        failed_runs,
        answerability: None,
        jafs: None,
        recall: None,
        ndcg: None,
        ece: None,
        mae: None,
        citation: None,
    };

    for metric in metrics {
        match metric {
            Metric::Answerability => {
                let label = |abstained: bool| {
                    if abstained {
                        AnswerabilityLabel::Unanswerable
                    } else {
                        AnswerabilityLabel::Answerable
                    }
                };
                let preds: Vec<_> = items.iter().map(|j| label(j.abstained)).collect();
                let golds: Vec<_> = items.iter().map(|j| j.gold.answerability()).collect();
                report.answerability = Some(classification_report(&preds, &golds).map_err(metric_err("answerability"))?);
            }
            Metric::Jafs => {
                let jafs_items = items
                    .iter()
                    .map(|j| {
                        let needs = !j.abstained && j.gold.answerable;
                        if needs && j.run.faithfulness.is_none() {
                            return Err(missing("jafs", "faithfulness", &j.run.id));
                        }
                        Ok(JafsItem { abstained: j.abstained, truth: j.gold.answerability(), faithfulness: j.run.faithfulness })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let r = jafs_report(&jafs_items).map_err(metric_err("jafs"))?;
                report.jafs = Some(JafsSummary { mean: r.mean, items: r.scores.len() });
            }
            Metric::Recall | Metric::Ndcg => {
                let name = metric.as_str();
                let mut scores = Vec::new();
                let mut skipped = 0;
                for j in &items {
                    let gold_ids = j.gold.gold_doc_ids.as_ref().ok_or_else(|| missing(name, "gold_doc_ids", &j.run.id))?;
                    let gold_set: BTreeSet<&str> = gold_ids.iter().map(String::as_str).collect();
                    if gold_set.is_empty() {
                        skipped += 1;
                        continue;
                    }
                    let ranked: Vec<&str> = j.run.retrieved.iter().map(|r| r.doc_id.as_str()).collect();
                    scores.push(if *metric == Metric::Recall {
                        recall_at_k(&ranked, &gold_set, k).map_err(metric_err("recall"))?
                    } else {
                        let gains = gold_set.iter().map(|id| (*id, 1.0)).collect();
                        ndcg_at_k(&ranked, &gains, k)
                    });
                }
                if scores.is_empty() {
                    return Err(EvalError::Metric { metric: name, source: MetricError::EmptyGold });
                }
                let summary = RankingSummary {
                    k,
                    mean: scores.iter().sum::<f64>() / scores.len() as f64,
                    evaluated: scores.len(),
                    skipped,
                };
                if *metric == Metric::Recall {
                    report.recall = Some(summary);
                } else {
                    report.ndcg = Some(summary);
                }
            }
            Metric::Ece => {
                let mut scores = Vec::new();
                let mut correct = Vec::new();
                for j in items.iter().filter(|j| !j.abstained) {
                    let level = j.run.certainty.ok_or_else(|| missing("ece", "certainty", &j.run.id))?;
                    let score = CertaintyScore::from_level(level).ok_or_else(|| EvalError::Metric {
                        metric: "ece",
                        source: MetricError::InvalidValue(format!("`{}`: certainty {level} is not a level", j.run.id)),
                    })?;
                    scores.push(score);
                    correct.push(j.gold.answer_correct.ok_or_else(|| missing("ece", "answer_correct", &j.run.id))?);
                }
                report.ece = Some(ece(&scores, &correct).map_err(metric_err("ece"))?);
            }
            Metric::Mae => {
                let mut preds = Vec::new();
                let mut targets = Vec::new();
                for j in items.iter().filter(|j| !j.abstained) {
                    preds.push(j.run.certainty.ok_or_else(|| missing("mae", "certainty", &j.run.id))?);
                    targets.push(j.gold.target_certainty.ok_or_else(|| missing("mae", "target_certainty", &j.run.id))?);
                }
                report.mae = Some(mae_certainty(&preds, &targets).map_err(metric_err("mae"))?);
            }
            Metric::Citation => {
                let mut pred = BTreeSet::new();
                let mut gold_pairs = BTreeSet::new();
                for j in items.iter().filter(|j| !j.abstained) {
                    let p = j.run.citations.as_ref().ok_or_else(|| missing("citation", "citations", &j.run.id))?;
                    let g = j.gold.citations.as_ref().ok_or_else(|| missing("citation", "citations", &j.run.id))?;
                    let id = j.run.id.as_str();
                    pred.extend(p.iter().flat_map(|(r, docs)| docs.iter().map(move |d| (id, *r, d.as_str()))));
                    gold_pairs.extend(g.iter().flat_map(|(r, docs)| docs.iter().map(move |d| (id, *r, d.as_str()))));
                }
                report.citation = Some(prf_pairs(&pred, &gold_pairs));
            }
        }
    }
    Ok(report)
}

/// Plain-text table of the headline numbers.
pub fn summary_table(report: &MetricsReport) -> String {
    let mut rows: Vec<(String, String)> = vec![
        ("items".into(), report.items.to_string()),
        ("failed runs".into(), report.failed_runs.to_string()),
    ];
    if let Some(a) = &report.answerability {
        for c in &a.classes {
            let name = c.label.as_str();
            rows.push((format!("{name} P/R/F1"), format!("{:.4} / {:.4} / {:.4}", c.precision, c.recall, c.f1)));
        }
        rows.push(("answerability weighted F1".into(), format!("{:.4}", a.weighted_f1)));
    }
    if let Some(j) = &report.jafs {
        rows.push(("JAFS".into(), format!("{:.4}", j.mean)));
    }
    if let Some(r) = &report.recall {
        rows.push((format!("recall@{}", r.k), format!("{:.4} (n={})", r.mean, r.evaluated)));
    }
    if let Some(r) = &report.ndcg {
        rows.push((format!("ndcg@{}", r.k), format!("{:.4} (n={})", r.mean, r.evaluated)));
    }
    if let Some(e) = &report.ece {
        rows.push(("ECE".into(), format!("{:.4}", e.ece)));
    }
    if let Some(m) = report.mae {
        rows.push(("certainty MAE (deciles)".into(), format!("{m:.4}")));
    }
    if let Some(c) = &report.citation {
        rows.push(("citation P/R/F1".into(), format!("{:.4} / {:.4} / {:.4}", c.precision, c.recall, c.f1)));
    }
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in rows {
        let _ = writeln!(out, "{k:<width$}  {v}");
    }
    out
}
