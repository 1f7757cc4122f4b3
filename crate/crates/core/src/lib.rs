//! Black-box hallucination detection for closed-book QA.
//!
//! A question is answered twice: once with a standard prompt and once with an
//! expression of (un)certainty placed in the answer slot. Disagreement between
//! the two answers, measured with an NLI model, flags likely hallucinations.
//! The crate also carries the usual baselines and a rank-based evaluation
//! harness.

pub mod cache;
pub mod concurrency;
pub mod corpus;
pub mod detectors;
pub mod eval;
pub mod llm;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nli;
pub mod pipeline;
pub mod prompting;
pub mod report;
pub mod synthetic;

pub use model::{
    builtin_expressions, ConsistencyLabel, DecodingParams, DetectionScore, Expression, ExpressionKind, FactualityLabel,
    FinishReason, Generation, MetricName, NliClass, NliVerdict, Orientation, QaItem, QaSource,
};
