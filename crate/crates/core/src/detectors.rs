//! Hallucination detection scores.
//!
//! The perturbation scores ([`f_score`], [`f_ensemble`]) compare a model
//! reference with the answer produced under an expression prompt. The
//! remaining functions are the baselines: log probability, answer entropy,
//! semantic entropy, lexical similarity and NLI self-consistency.

use std::collections::BTreeSet;
use std::path::Path;

use thiserror::Error;

use crate::metrics::{self, length_normalized_logprob, normalize_answer, MetricError};
use crate::model::{Generation, NliClass, NliVerdict};
use crate::nli::{NliError, NliGateway};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Nli(#[from] NliError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("ensemble needs at least two scores, got {0}")]
    TooFewScores(usize),
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("clusters do not form a valid partition: {0}")]
    InvalidPartition(String),
}

/// `logit_contradiction - logit_entailment`.
pub fn f_score_from_verdict(v: &NliVerdict) -> f64 {
    v.logit_contradiction - v.logit_entailment
}

/// Perturbation score: higher means the perturbed answer contradicts the
/// reference, i.e. the reference is more likely hallucinated.
pub fn f_score(nli: &NliGateway, question: &str, reference: &str, perturbed: &str) -> Result<f64, DetectorError> {
    let input = nli.input(question, reference, perturbed)?;
    Ok(f_score_from_verdict(&nli.score(&input)?))
}

/// Minimum over per-expression scores.
pub fn f_ensemble(scores: &[f64]) -> Result<f64, DetectorError> {
    if scores.len() < 2 {
        return Err(DetectorError::TooFewScores(scores.len()));
    }
    Ok(scores.iter().copied().fold(f64::INFINITY, f64::min))
}

pub fn baseline_logp(reference: &Generation) -> Result<f64, DetectorError> {
    Ok(length_normalized_logprob(reference)?.value())
}

pub fn baseline_entropy(samples: &[Generation]) -> Result<f64, DetectorError> {
    Ok(metrics::response_entropy(samples)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticCluster {
    pub member_indices: Vec<usize>,
    pub mass: f64,
}

fn bidirectional_entailment(nli: &NliGateway, question: &str, a: &str, b: &str) -> Result<bool, DetectorError> {
    match (a.trim().is_empty(), b.trim().is_empty()) {
        (true, true) => return Ok(true),
        (true, false) | (false, true) => return Ok(false),
        _ => {}
    }
    let forward = nli.input(question, a, b)?;
    let verdicts = nli.score_batch(&[forward.clone(), forward.reversed()])?;
    Ok(verdicts.iter().all(|v| v.argmax() == NliClass::Entailment))
}

/// Greedy clustering by bidirectional entailment against each cluster's
/// founding member, in sample order. Cluster mass is the sum of the members'
/// length-normalized sequence probabilities, renormalized over all samples.
pub fn cluster_semantic(nli: &NliGateway, question: &str, samples: &[Generation]) -> Result<Vec<SemanticCluster>, DetectorError> {
    if samples.is_empty() {
        return Err(MetricError::NoSamples.into());
    }
    let log_weights = samples
        .iter()
        .map(|g| length_normalized_logprob(g).map(|lp| lp.value()))
        .collect::<Result<Vec<_>, _>>()?;

    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, sample) in samples.iter().enumerate() {
        let mut home = None;
        for (c, members) in groups.iter().enumerate() {
            let founder = &samples[members[0]];
            if bidirectional_entailment(nli, question, &founder.text, &sample.text)? {
                home = Some(c);
                break;
            }
        }
        match home {
            Some(c) => groups[c].push(i),
            None => groups.push(vec![i]),
        }
    }

    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(groups
        .into_iter()
        .map(|members| {
            let mass = members.iter().map(|&i| weights[i]).sum::<f64>() / total;
            SemanticCluster {
                member_indices: members,
                mass,
            }
        })
        .collect())
}

/// `-Σ p(c) ln p(c)` over cluster masses.
pub fn semantic_entropy(clusters: &[SemanticCluster]) -> Result<f64, DetectorError> {
    if clusters.is_empty() {
        return Err(DetectorError::InvalidPartition("no clusters".into()));
    }
    let mut seen = BTreeSet::new();
    for c in clusters {
        if c.member_indices.is_empty() {
            return Err(DetectorError::InvalidPartition("empty cluster".into()));
        }
        if !(c.mass > 0.0 && c.mass <= 1.0 + 1e-12) {
            return Err(DetectorError::InvalidPartition(format!("mass {} outside (0, 1]", c.mass)));
        }
        for &i in &c.member_indices {
            if !seen.insert(i) {
                return Err(DetectorError::InvalidPartition(format!("sample {i} in two clusters")));
            }
        }
    }
    if seen.iter().copied().ne(0..seen.len()) {
        return Err(DetectorError::InvalidPartition("sample indices are not contiguous from 0".into()));
    }
    let total: f64 = clusters.iter().map(|c| c.mass).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DetectorError::InvalidPartition(format!("masses sum to {total}")));
    }
    let h: f64 = clusters.iter().map(|c| -c.mass * c.mass.ln()).sum();
    Ok(h.max(0.0))
}

/// Length of the longest common subsequence of two token slices.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure over whitespace tokens.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    rouge_l_tokens(&c, &r)
}

pub fn rouge_l_tokens<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Mean pairwise ROUGE-L over ordered pairs of distinct samples.
pub fn lexical_similarity(samples: &[Generation]) -> Result<f64, DetectorError> {
    mean_pairwise(samples.len(), |i, j| rouge_l(&samples[i].text, &samples[j].text))
}

/// `1/(m(m-1)) Σ_{i≠j} sim(i, j)`.
pub fn mean_pairwise<F: Fn(usize, usize) -> f64>(m: usize, sim: F) -> Result<f64, DetectorError> {
    if m < 2 {
        return Err(DetectorError::TooFewSamples(m));
    }
    let mut sum = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                sum += sim(i, j);
            }
        }
    }
    Ok(sum / (m * (m - 1)) as f64)
}

/// Mean softmax contradiction probability between the reference and each
/// sample. Samples with empty text are skipped.
pub fn selfcheck_nli(nli: &NliGateway, question: &str, reference: &str, samples: &[Generation]) -> Result<f64, DetectorError> {
    let inputs = samples
        .iter()
        .filter(|s| !s.text.trim().is_empty())
        .map(|s| nli.input(question, reference, &s.text))
        .collect::<Result<Vec<_>, _>>()?;
    if inputs.is_empty() {
        return Err(MetricError::NoSamples.into());
    }
    let verdicts = nli.score_batch(&inputs)?;
    Ok(mean_contradiction(&verdicts))
}

pub fn mean_contradiction(verdicts: &[NliVerdict]) -> f64 {
    verdicts.iter().map(|v| v.softmax()[2]).sum::<f64>() / verdicts.len() as f64
}

pub const DEFAULT_ABSTENTION_PATTERNS: &[&str] = &[
    "i can not answer",
    "i cannot answer",
    "cannot be determined",
    "need more information",
    "please provide more",
    "impossible to answer",
    "not possible to answer",
    "unable to answer",
    "without more information",
];

/// Matches "I can not answer"-type responses.
#[derive(Debug, Clone)]
pub struct AbstentionPatterns {
    patterns: Vec<String>,
}

impl Default for AbstentionPatterns {
    fn default() -> Self {
        Self::new(DEFAULT_ABSTENTION_PATTERNS.iter().copied())
    }
}

impl AbstentionPatterns {
    pub fn new<'a, I: IntoIterator<Item = &'a str>>(patterns: I) -> Self {
        let patterns = patterns
            .into_iter()
            .map(normalize_answer)
            .filter(|p| !p.is_empty())
            .collect();
        Self { patterns }
    }

    /// One pattern per line; blank lines and `#` comments ignored.
    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::new(
            text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')),
        ))
    }

    pub fn matches(&self, text: &str) -> bool {
        let norm = normalize_answer(text);
        if norm.is_empty() {
            return false;
        }
        let padded = format!(" {norm} ");
        self.patterns.iter().any(|p| padded.contains(&format!(" {p} ")))
    }
}

/// Uses the default pattern list.
pub fn classify_abstention(text: &str) -> bool {
    AbstentionPatterns::default().matches(text)
}
