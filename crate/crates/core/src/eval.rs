//! Rank-based evaluation and group breakdowns.
//!
//! The positive class is a hallucinated (non-factual) reference. Scores are
//! expected in hallucination orientation: larger means more likely
//! hallucinated. Use [`DetectionScore::hallucination_score`] to orient
//! metrics whose natural direction is the opposite.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ConsistencyLabel, DetectionScore, FactualityLabel, MetricName, NliClass, QaItem};
use crate::nli::{NliError, NliGateway};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least one positive and one negative label (got {n_pos} positive, {n_neg} negative)")]
    DegenerateLabels { n_pos: usize, n_neg: usize },
    #[error("score is not finite")]
    NonFiniteScore,
    #[error("{} item(s) lack a factuality label, first: {}", .0.len(), .0.first().map(String::as_str).unwrap_or(""))]
    MissingLabels(Vec<String>),
    #[error(transparent)]
    Nli(#[from] NliError),
}

fn check(scores: &[(f64, bool)]) -> Result<(usize, usize), EvalError> {
    if scores.iter().any(|(s, _)| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore);
    }
    let n_pos = scores.iter().filter(|(_, y)| *y).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::DegenerateLabels { n_pos, n_neg });
    }
    Ok((n_pos, n_neg))
}

/// Probability that a random positive outranks a random negative, ties
/// counted one half. Computed from average ranks in O(n log n).
pub fn auroc(scores: &[(f64, bool)]) -> Result<f64, EvalError> {
    let (n_pos, n_neg) = check(scores)?;
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j share their average.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = sorted[i..j].iter().filter(|(_, y)| *y).count();
        rank_sum_pos += avg_rank * pos_in_group as f64;
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Average precision with step interpolation, plus one curve point per
/// distinct score threshold from the highest down. Tied scores enter
/// together.
pub fn auprc(scores: &[(f64, bool)]) -> Result<(f64, Vec<PrPoint>), EvalError> {
    let (n_pos, _) = check(scores)?;
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push(PrPoint {
            threshold,
            recall,
            precision,
        });
    }
    Ok((ap, points))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMean {
    pub group: String,
    pub n: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric_name: MetricName,
    pub auroc: f64,
    pub auprc: f64,
    pub pr_points: Vec<PrPoint>,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Mean raw metric value per factuality (and, for expression-based
    /// metrics, consistency) group.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdowns: Option<Vec<GroupMean>>,
}

/// Pairs each score with its item's label (positive = non-factual).
pub fn labeled_scores(scores: &[DetectionScore], items: &[QaItem]) -> Result<Vec<(f64, bool)>, EvalError> {
    let labels: HashMap<&str, Option<FactualityLabel>> =
        items.iter().map(|i| (i.id.as_str(), i.factuality_label)).collect();
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(scores.len());
    for s in scores {
        match labels.get(s.item_id.as_str()).copied().flatten() {
            Some(l) => out.push((s.hallucination_score(), l == FactualityLabel::NonFactual)),
            None => missing.push(s.item_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(EvalError::MissingLabels(missing));
    }
    Ok(out)
}

/// AUROC/AUPRC report for one metric's scores.
pub fn evaluate_metric(metric: MetricName, scores: &[DetectionScore], items: &[QaItem]) -> Result<EvalReport, EvalError> {
    let labeled = labeled_scores(scores, items)?;
    let (n_pos, n_neg) = check(&labeled)?;
    let (ap, pr_points) = auprc(&labeled)?;
    Ok(EvalReport {
        metric_name: metric,
        auroc: auroc(&labeled)?,
        auprc: ap,
        pr_points,
        n_pos,
        n_neg,
        breakdowns: None,
    })
}

/// Mean raw value per group. `consistency` supplies each item's
/// consistency label when the metric is tied to one expression.
pub fn metric_group_means(
    scores: &[DetectionScore],
    items: &[QaItem],
    consistency: Option<&HashMap<String, ConsistencyLabel>>,
) -> Vec<GroupMean> {
    let by_id: HashMap<&str, &QaItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut acc: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for s in scores {
        let Some(label) = by_id.get(s.item_id.as_str()).and_then(|i| i.factuality_label) else {
            continue;
        };
        let fact = match label {
            FactualityLabel::Factual => "F",
            FactualityLabel::NonFactual => "NF",
        };
        let mut keys = vec![fact.to_owned()];
        if let Some(c) = consistency.and_then(|m| m.get(&s.item_id)) {
            let con = match c {
                ConsistencyLabel::Consistent => "Con",
                ConsistencyLabel::NonConsistent => "NonCon",
            };
            keys.push(format!("{fact}/{con}"));
        }
        for k in keys {
            let e = acc.entry(k).or_default();
            e.0 += 1;
            e.1 += s.value;
        }
    }
    acc.into_iter()
        .map(|(group, (n, sum))| GroupMean {
            group,
            n,
            mean: sum / n as f64,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Group breakdowns

/// Per-item measurements under one expression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionObservation {
    pub item_id: String,
    pub expression_id: String,
    pub consistency: Option<ConsistencyLabel>,
    pub logprob_ratio: Option<f64>,
    pub entropy: Option<f64>,
    /// Factuality of the expression-prompt answer, when labeled.
    pub response_factual: Option<bool>,
    pub abstained: bool,
    pub reference_logp: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BreakdownGroup {
    Factual,
    NonFactual,
    Consistent,
    NonConsistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub expression_id: String,
    pub group: BreakdownGroup,
    pub n: usize,
    /// Percentage of factual expression-prompt answers.
    pub accuracy_pct: Option<f64>,
    /// Percentage of consistent answers; factuality groups only.
    pub consistency_pct: Option<f64>,
    pub mean_logprob_ratio: Option<f64>,
    pub mean_entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstentionRow {
    pub expression_id: String,
    pub n: usize,
    pub mean_reference_logp: Option<f64>,
    pub mean_logprob_ratio: Option<f64>,
}

/// Within the consistent group, how well confidence change and entropy
/// separate non-factual from factual references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistentGroupAuroc {
    pub expression_id: String,
    pub n: usize,
    /// Hallucination score is the negated log-probability ratio.
    pub logprob_ratio_auroc: Option<f64>,
    pub entropy_auroc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub rows: Vec<BreakdownRow>,
    pub abstention: Vec<AbstentionRow>,
    pub consistent_group_auroc: Vec<ConsistentGroupAuroc>,
    pub warnings: Vec<String>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| s / n as f64)
}

fn pct(hits: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| 100.0 * hits as f64 / n as f64)
}

/// Accuracy, consistency, mean log-probability ratio and mean entropy per
/// expression and group. Empty groups are omitted with a warning.
pub fn group_breakdown(items: &[QaItem], observations: &[ExpressionObservation]) -> Result<Breakdown, EvalError> {
    let labels: HashMap<&str, Option<FactualityLabel>> =
        items.iter().map(|i| (i.id.as_str(), i.factuality_label)).collect();
    let missing: Vec<String> = items
        .iter()
        .filter(|i| i.factuality_label.is_none())
        .map(|i| i.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingLabels(missing));
    }

    let mut by_expr: BTreeMap<&str, Vec<(&ExpressionObservation, FactualityLabel)>> = BTreeMap::new();
    for o in observations {
        if let Some(Some(l)) = labels.get(o.item_id.as_str()) {
            by_expr.entry(o.expression_id.as_str()).or_default().push((o, *l));
        }
    }

    let mut out = Breakdown::default();
    for (expr, obs) in by_expr {
        for group in [
            BreakdownGroup::Factual,
            BreakdownGroup::NonFactual,
            BreakdownGroup::Consistent,
            BreakdownGroup::NonConsistent,
        ] {
            let members: Vec<&ExpressionObservation> = obs
                .iter()
                .filter(|(o, l)| match group {
                    BreakdownGroup::Factual => *l == FactualityLabel::Factual,
                    BreakdownGroup::NonFactual => *l == FactualityLabel::NonFactual,
                    BreakdownGroup::Consistent => o.consistency == Some(ConsistencyLabel::Consistent),
                    BreakdownGroup::NonConsistent => o.consistency == Some(ConsistencyLabel::NonConsistent),
                })
                .map(|(o, _)| *o)
                .collect();
            if members.is_empty() {
                let msg = format!("expression `{expr}`: group {group:?} is empty; row omitted");
                log::warn!("{msg}");
                out.warnings.push(msg);
                continue;
            }
            let labeled_resp: Vec<bool> = members.iter().filter_map(|o| o.response_factual).collect();
            let consistency_pct = match group {
                BreakdownGroup::Factual | BreakdownGroup::NonFactual => {
                    let known: Vec<_> = members.iter().filter_map(|o| o.consistency).collect();
                    pct(
                        known.iter().filter(|c| **c == ConsistencyLabel::Consistent).count(),
                        known.len(),
                    )
                }
                _ => None,
            };
            out.rows.push(BreakdownRow {
                expression_id: expr.to_owned(),
                group,
                n: members.len(),
                accuracy_pct: pct(labeled_resp.iter().filter(|f| **f).count(), labeled_resp.len()),
                consistency_pct,
                mean_logprob_ratio: mean(members.iter().filter_map(|o| o.logprob_ratio)),
                mean_entropy: mean(members.iter().filter_map(|o| o.entropy)),
            });
        }

        let abst: Vec<_> = obs.iter().filter(|(o, _)| o.abstained).map(|(o, _)| *o).collect();
        out.abstention.push(AbstentionRow {
            expression_id: expr.to_owned(),
            n: abst.len(),
            mean_reference_logp: mean(abst.iter().filter_map(|o| o.reference_logp)),
            mean_logprob_ratio: mean(abst.iter().filter_map(|o| o.logprob_ratio)),
        });

        let consistent: Vec<_> = obs
            .iter()
            .filter(|(o, _)| o.consistency == Some(ConsistencyLabel::Consistent))
            .collect();
        let ratio_scores: Vec<(f64, bool)> = consistent
            .iter()
            .filter_map(|(o, l)| o.logprob_ratio.map(|r| (-r, *l == FactualityLabel::NonFactual)))
            .collect();
        let entropy_scores: Vec<(f64, bool)> = consistent
            .iter()
            .filter_map(|(o, l)| o.entropy.map(|h| (h, *l == FactualityLabel::NonFactual)))
            .collect();
        out.consistent_group_auroc.push(ConsistentGroupAuroc {
            expression_id: expr.to_owned(),
            n: consistent.len(),
            logprob_ratio_auroc: auroc(&ratio_scores).ok(),
            entropy_auroc: auroc(&entropy_scores).ok(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// NLI-assisted labeling helpers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome")]
pub enum TriageOutcome {
    AutoKeep { suggestion: FactualityLabel },
    NeedsHuman,
}

/// Neutral-argmax pairs go to a human; otherwise the dominant of
/// entailment/contradiction is attached as a suggested label.
pub fn triage_for_annotation(nli: &NliGateway, question: &str, reference: &str, gold: &str) -> Result<TriageOutcome, EvalError> {
    let v = nli.score(&nli.input(question, reference, gold)?)?;
    Ok(match v.argmax() {
        NliClass::Neutral => TriageOutcome::NeedsHuman,
        _ if v.logit_entailment >= v.logit_contradiction => TriageOutcome::AutoKeep {
            suggestion: FactualityLabel::Factual,
        },
        _ => TriageOutcome::AutoKeep {
            suggestion: FactualityLabel::NonFactual,
        },
    })
}

/// Triage against every gold answer: any factual suggestion wins, then any
/// neutral verdict sends the item to a human.
pub fn triage_item(nli: &NliGateway, item: &QaItem, reference: &str) -> Result<TriageOutcome, EvalError> {
    let mut outcome = TriageOutcome::AutoKeep {
        suggestion: FactualityLabel::NonFactual,
    };
    for gold in item.gold_answers.iter().filter(|g| !g.trim().is_empty()) {
        match triage_for_annotation(nli, &item.question, reference, gold)? {
            t @ TriageOutcome::AutoKeep {
                suggestion: FactualityLabel::Factual,
            } => return Ok(t),
            TriageOutcome::NeedsHuman => outcome = TriageOutcome::NeedsHuman,
            _ => {}
        }
    }
    Ok(outcome)
}

/// Consistent iff the entailment logit exceeds the contradiction logit.
pub fn consistency_proxy(nli: &NliGateway, question: &str, reference: &str, perturbed: &str) -> Result<ConsistencyLabel, EvalError> {
    let v = nli.score(&nli.input(question, reference, perturbed)?)?;
    Ok(if v.logit_entailment > v.logit_contradiction {
        ConsistencyLabel::Consistent
    } else {
        ConsistencyLabel::NonConsistent
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Manual,
    NliProxy,
}

/// Manual consistency labels take precedence over the proxy.
pub fn resolve_consistency(
    item: &QaItem,
    expression_id: &str,
    proxy: impl FnOnce() -> Result<ConsistencyLabel, EvalError>,
) -> Result<(ConsistencyLabel, LabelSource), EvalError> {
    match item.consistency_for(expression_id) {
        Some(l) => Ok((l, LabelSource::Manual)),
        None => Ok((proxy()?, LabelSource::NliProxy)),
    }
}

// ---------------------------------------------------------------------------
// Binary decisions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdNormalization {
    Minmax,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub item_id: String,
    pub metric_name: MetricName,
    pub normalized: f64,
    pub hallucinated: bool,
}

/// Maps hallucination-oriented scores to [0, 1] and flags those at or above
/// `threshold`. Min-max is taken over the given split; a constant split maps
/// to 0.5.
pub fn threshold_decisions(scores: &[DetectionScore], normalization: ThresholdNormalization, threshold: f64) -> Vec<Decision> {
    let oriented: Vec<f64> = scores.iter().map(DetectionScore::hallucination_score).collect();
    let lo = oriented.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = oriented.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    scores
        .iter()
        .zip(oriented)
        .map(|(s, x)| {
            let normalized = match normalization {
                ThresholdNormalization::Minmax if hi > lo => (x - lo) / (hi - lo),
                ThresholdNormalization::Minmax => 0.5,
                ThresholdNormalization::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            };
            Decision {
                item_id: s.item_id.clone(),
                metric_name: s.metric_name,
                normalized,
                hallucinated: normalized >= threshold,
            }
        })
        .collect()
}
