//! Deterministic synthetic corpora with matching scripted mocks, for
//! offline end-to-end runs.
//!
//! Half of the items answer the same way under every prompt and are
//! labeled factual; the other half switch answers under expression prompts
//! and are labeled non-factual.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::llm::{MockRule, MockSample, MockScript};
use crate::model::{builtin_expressions, FactualityLabel, MetricName, QaItem, QaSource};
use crate::nli::MockNliConfig;
use crate::prompting::PromptTemplates;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFixture {
    pub items: Vec<QaItem>,
    pub script: MockScript,
}

fn sample(text: String, lp: &[f64]) -> MockSample {
    MockSample {
        text,
        token_logprobs: Some(lp.to_vec()),
    }
}

/// `n` items, alternating consistent (even index) and switching (odd).
pub fn synthetic_fixture(n: usize) -> SyntheticFixture {
    let templates = PromptTemplates::default();
    let mut items = Vec::with_capacity(n);
    let mut rules = Vec::new();
    for i in 0..n {
        let consistent = i % 2 == 0;
        let mut item = QaItem::new(
            format!("syn-{i:04}"),
            format!("Which city hosts synthetic landmark number {i}?"),
            vec![format!("Alpha City {i}")],
            QaSource::Synthetic,
        );
        item.factuality_label = Some(if consistent {
            FactualityLabel::Factual
        } else {
            FactualityLabel::NonFactual
        });

        let answer = format!("Alpha City {i}");
        let other = format!("Beta Town {i}");
        let (ref_lp, exp_lp): (&[f64], &[f64]) = if consistent {
            (&[-0.05, -0.1, -0.02], &[-0.08, -0.12, -0.03])
        } else {
            (&[-0.6, -1.1, -0.4], &[-1.3, -1.9, -0.8])
        };
        let samples = if consistent {
            vec![sample(answer.clone(), ref_lp)]
        } else {
            vec![
                sample(answer.clone(), ref_lp),
                sample(other.clone(), exp_lp),
                sample(format!("Gamma Port {i}"), exp_lp),
            ]
        };
        let standard = templates.render_standard(&item).expect("valid synthetic item");
        rules.push(MockRule {
            contains: standard.text,
            text: format!(" {answer}"),
            token_logprobs: Some(ref_lp.to_vec()),
            samples: samples.clone(),
        });
        for e in builtin_expressions() {
            let prompt = templates.render_expression(&item, &e).expect("valid synthetic item");
            rules.push(MockRule {
                contains: prompt.text,
                text: format!(" {}", if consistent { &answer } else { &other }),
                token_logprobs: Some(exp_lp.to_vec()),
                samples: samples.clone(),
            });
        }
        items.push(item);
    }
    SyntheticFixture {
        items,
        script: MockScript {
            backend_id: "synthetic".into(),
            latency_ms: 0,
            rules,
        },
    }
}

/// Seeded choice of `round(fraction * n)` item questions.
pub fn flipped_questions(items: &[QaItem], fraction: f64, seed: u64) -> Vec<String> {
    let k = ((items.len() as f64) * fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, items.len(), k.min(items.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].question.clone()).collect()
}

/// Writes `corpus.jsonl`, `mock.json`, `nli.json` and `manifest.toml` into
/// `dir` and returns the manifest path.
pub fn write_fixture(dir: &Path, fixture: &SyntheticFixture, nli: &MockNliConfig, metrics: &[MetricName]) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut unlabeled = fixture.items.clone();
    let mut labels = String::new();
    for it in &mut unlabeled {
        let factual = it.factuality_label.take() == Some(FactualityLabel::Factual);
        labels.push_str(&format!("{{\"id\":\"{}\",\"factuality\":{}}}\n", it.id, factual));
    }
    fs::write(dir.join("corpus.jsonl"), crate::corpus::items_to_jsonl(&unlabeled))?;
    fs::write(dir.join("labels.jsonl"), labels)?;
    fs::write(dir.join("mock.json"), serde_json::to_string_pretty(&fixture.script)?)?;
    fs::write(dir.join("nli.json"), serde_json::to_string_pretty(nli)?)?;
    let metrics: Vec<String> = metrics.iter().map(|m| format!("\"{m}\"")).collect();
    let manifest = format!(
        r#"corpus_path = "corpus.jsonl"
corpus_format = "items"
labels_path = "labels.jsonl"
expressions = ["unsure", "mustbe"]
metrics = [{}]
output_dir = "out"

[backend]
kind = "scripted_mock"
model_name = "synthetic"
mock_path = "mock.json"
max_in_flight = 4

[nli]
kind = "mock"
mock_path = "nli.json"
"#,
        metrics.join(", ")
    );
    let path = dir.join("manifest.toml");
    fs::write(&path, manifest)?;
    Ok(path)
}
