//! Shared domain types.
//!
//! Every record type here serializes to one JSON object per line, with field
//! names as declared. All types are plain immutable values.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Human factuality judgement of a model reference answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FactualityLabel {
    Factual,
    NonFactual,
}

/// Whether a perturbed-prompt answer agrees with the model reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConsistencyLabel {
    Consistent,
    NonConsistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QaSource {
    HotpotQA,
    NqOpen,
    Synthetic,
}

/// One question with its gold answers and optional labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factuality_label: Option<FactualityLabel>,
    /// Keyed by expression id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency_label: Option<BTreeMap<String, ConsistencyLabel>>,
    /// Factuality of the answer produced under each expression prompt, keyed
    /// by expression id. Only needed for accuracy columns in breakdowns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_factuality: Option<BTreeMap<String, FactualityLabel>>,
    pub source: QaSource,
}

impl QaItem {
    pub fn new(id: impl Into<String>, question: impl Into<String>, gold: Vec<String>, source: QaSource) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            gold_answers: gold,
            factuality_label: None,
            consistency_label: None,
            response_factuality: None,
            source,
        }
    }

    pub fn consistency_for(&self, expression_id: &str) -> Option<ConsistencyLabel> {
        self.consistency_label.as_ref()?.get(expression_id).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExpressionKind {
    Certainty,
    Uncertainty,
}

/// A phrase placed in the answer slot to perturb the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Expression {
    /// Stable slug, used in cache keys and report columns.
    pub id: String,
    pub text: String,
    pub kind: ExpressionKind,
}

impl Expression {
    pub fn new(id: &str, text: &str, kind: ExpressionKind) -> Self {
        Self {
            id: id.to_owned(),
            text: text.to_owned(),
            kind,
        }
    }
}

/// The four built-in expressions, uncertainty first.
pub fn builtin_expressions() -> Vec<Expression> {
    use ExpressionKind::*;
    vec![
        Expression::new("unsure", "I am not sure but it could be", Uncertainty),
        Expression::new("doublecheck", "I would need to double check but maybe it is", Uncertainty),
        Expression::new("mustbe", "It must be", Certainty),
        Expression::new("undoubtedly", "Undoubtedly it is", Certainty),
    ]
}

pub fn builtin_expression(id: &str) -> Option<Expression> {
    builtin_expressions().into_iter().find(|e| e.id == id)
}

/// Decoding settings for one collection phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub n_samples: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DecodingParams {
    /// Greedy decoding, single response.
    pub fn greedy(max_tokens: u32) -> Self {
        Self {
            temperature: 0.0,
            max_tokens,
            n_samples: 1,
            seed: None,
        }
    }

    pub fn sampling(temperature: f64, n_samples: u32, max_tokens: u32) -> Self {
        Self {
            temperature,
            max_tokens,
            n_samples,
            seed: None,
        }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self::greedy(64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    #[serde(other)]
    Other,
}

/// One completion with per-token natural-log probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    /// `None` when the backend did not report logprobs. Values are ≤ 0.
    pub token_logprobs: Option<Vec<f64>>,
    pub finish_reason: FinishReason,
    pub prompt_fingerprint: String,
}

/// Raw three-class NLI logits for an ordered text pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliVerdict {
    pub logit_entailment: f64,
    pub logit_neutral: f64,
    pub logit_contradiction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NliClass {
    Entailment,
    Neutral,
    Contradiction,
}

impl NliVerdict {
    pub fn new(entailment: f64, neutral: f64, contradiction: f64) -> Self {
        Self {
            logit_entailment: entailment,
            logit_neutral: neutral,
            logit_contradiction: contradiction,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.logit_entailment.is_finite() && self.logit_neutral.is_finite() && self.logit_contradiction.is_finite()
    }

    /// Probabilities in (entailment, neutral, contradiction) order.
    pub fn softmax(&self) -> [f64; 3] {
        let logits = [self.logit_entailment, self.logit_neutral, self.logit_contradiction];
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps = logits.map(|l| (l - max).exp());
        let sum: f64 = exps.iter().sum();
        exps.map(|e| e / sum)
    }

    /// Ties resolve in (entailment, neutral, contradiction) order.
    pub fn argmax(&self) -> NliClass {
        let mut best = (NliClass::Entailment, self.logit_entailment);
        if self.logit_neutral > best.1 {
            best = (NliClass::Neutral, self.logit_neutral);
        }
        if self.logit_contradiction > best.1 {
            best = (NliClass::Contradiction, self.logit_contradiction);
        }
        best.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    HigherMeansHallucination,
    LowerMeansHallucination,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    FCertain,
    FUncertain,
    FEnsemble,
    LogP,
    Entropy,
    SemanticEntropy,
    LexicalSimilarity,
    #[serde(rename = "selfcheck_nli")]
    SelfCheckNli,
}

impl MetricName {
    pub const ALL: [MetricName; 8] = [
        MetricName::LogP,
        MetricName::Entropy,
        MetricName::SemanticEntropy,
        MetricName::LexicalSimilarity,
        MetricName::SelfCheckNli,
        MetricName::FCertain,
        MetricName::FUncertain,
        MetricName::FEnsemble,
    ];

    pub fn orientation(self) -> Orientation {
        match self {
            MetricName::LogP | MetricName::LexicalSimilarity => Orientation::LowerMeansHallucination,
            _ => Orientation::HigherMeansHallucination,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::FCertain => "f_certain",
            MetricName::FUncertain => "f_uncertain",
            MetricName::FEnsemble => "f_ensemble",
            MetricName::LogP => "log_p",
            MetricName::Entropy => "entropy",
            MetricName::SemanticEntropy => "semantic_entropy",
            MetricName::LexicalSimilarity => "lexical_similarity",
            MetricName::SelfCheckNli => "selfcheck_nli",
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric `{s}`"))
    }
}

/// A metric value for one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub item_id: String,
    pub metric_name: MetricName,
    pub value: f64,
    pub orientation: Orientation,
}

impl DetectionScore {
    pub fn new(item_id: impl Into<String>, metric_name: MetricName, value: f64) -> Self {
        Self {
            item_id: item_id.into(),
            metric_name,
            value,
            orientation: metric_name.orientation(),
        }
    }

    /// Value oriented so that larger means "more likely hallucinated".
    pub fn hallucination_score(&self) -> f64 {
        match self.orientation {
            Orientation::HigherMeansHallucination => self.value,
            Orientation::LowerMeansHallucination => -self.value,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn builtin_table() {
        let exps = builtin_expressions();
        let rows: Vec<_> = exps.iter().map(|e| (e.id.as_str(), e.text.as_str(), e.kind)).collect();
        assert_eq!(
            rows,
            vec![
                ("unsure", "I am not sure but it could be", ExpressionKind::Uncertainty),
                ("doublecheck", "I would need to double check but maybe it is", ExpressionKind::Uncertainty),
                ("mustbe", "It must be", ExpressionKind::Certainty),
                ("undoubtedly", "Undoubtedly it is", ExpressionKind::Certainty),
            ]
        );
        assert_eq!(exps.len(), 4);
        assert_eq!(exps.iter().filter(|e| e.kind == ExpressionKind::Uncertainty).count(), 2);
        assert_eq!(exps.iter().filter(|e| e.kind == ExpressionKind::Certainty).count(), 2);
    }

    #[test]
    fn metric_names_roundtrip_through_str() {
        for m in MetricName::ALL {
            assert_eq!(m.as_str().parse::<MetricName>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
    }

    #[test]
    fn orientation_flips_sign() {
        let s = DetectionScore::new("a", MetricName::LogP, -0.3);
        assert_eq!(s.orientation, Orientation::LowerMeansHallucination);
        assert_eq!(s.hallucination_score(), 0.3);
    }

    #[test]
    fn argmax_ties_prefer_entailment() {
        assert_eq!(NliVerdict::new(0.0, 0.0, 0.0).argmax(), NliClass::Entailment);
        assert_eq!(NliVerdict::new(1.0, 5.0, 0.0).argmax(), NliClass::Neutral);
        assert_eq!(NliVerdict::new(0.0, 1.0, 5.0).argmax(), NliClass::Contradiction);
    }

    fn arb_item() -> impl Strategy<Value = QaItem> {
        let labels = proptest::option::of(prop_oneof![Just(FactualityLabel::Factual), Just(FactualityLabel::NonFactual)]);
        let cons = proptest::option::of(proptest::collection::btree_map(
            "[a-z]{1,8}",
            prop_oneof![Just(ConsistencyLabel::Consistent), Just(ConsistencyLabel::NonConsistent)],
            0..4,
        ));
        (
            "[a-zA-Z0-9_-]{1,12}",
            ".{1,40}",
            proptest::collection::vec(".{0,20}", 1..4),
            labels,
            cons,
            prop_oneof![Just(QaSource::HotpotQA), Just(QaSource::NqOpen), Just(QaSource::Synthetic)],
        )
            .prop_map(|(id, q, gold, fl, cl, src)| {
                let mut item = QaItem::new(id, q, gold, src);
                item.factuality_label = fl;
                item.consistency_label = cl;
                item
            })
    }

    proptest! {
        #[test]
        fn qa_item_roundtrips(item in arb_item()) {
            let line = serde_json::to_string(&item).unwrap();
            let back: QaItem = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(back, item);
        }

        #[test]
        fn softmax_is_a_distribution(e in -1e3f64..1e3, n in -1e3f64..1e3, c in -1e3f64..1e3) {
            let p = NliVerdict::new(e, n, c).softmax();
            prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
