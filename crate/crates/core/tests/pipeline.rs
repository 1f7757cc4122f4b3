use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use hallucheck_core::llm::{Completion, CompletionBackend, GatewayError, MockRule, MockScript, ScriptedMock};
use hallucheck_core::manifest::ExperimentManifest;
use hallucheck_core::nli::{MockNli, MockNliConfig};
use hallucheck_core::pipeline::{self, PipelineError};
use hallucheck_core::synthetic::{synthetic_fixture, write_fixture};
use hallucheck_core::{DecodingParams, DetectionScore, MetricName};

/// Wraps a scripted mock and records every request.
struct Recording {
    inner: ScriptedMock,
    log: Mutex<Vec<(DecodingParams, Vec<u32>)>>,
}

impl CompletionBackend for Recording {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }
    fn generate(&self, prompt: &str, params: &DecodingParams, idx: &[u32]) -> Result<Vec<Completion>, GatewayError> {
        self.log.lock().unwrap().push((params.clone(), idx.to_vec()));
        self.inner.generate(prompt, params, idx)
    }
}

fn setup(dir: &Path, n: usize, metrics: &[MetricName]) -> ExperimentManifest {
    let f = synthetic_fixture(n);
    let path = write_fixture(dir, &f, &MockNliConfig::default(), metrics).unwrap();
    ExperimentManifest::load(&path).unwrap()
}

fn script(m: &ExperimentManifest) -> MockScript {
    serde_json::from_str(&fs::read_to_string(m.backend.mock_path.as_ref().unwrap()).unwrap()).unwrap()
}

fn nli_mock() -> Arc<MockNli> {
    Arc::new(MockNli::new(MockNliConfig::default()))
}

#[test]
fn collect_counts_generations_and_reruns_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let m = setup(dir.path(), 3, &[MetricName::FCertain, MetricName::FUncertain]);
    let mock = Arc::new(ScriptedMock::new(script(&m)));

    let llm = pipeline::open_llm(&m, mock.clone()).unwrap();
    let summary = pipeline::collect(&m, &llm).unwrap();
    assert_eq!((summary.items, summary.generations, summary.sample_sets), (3, 9, 0));
    assert_eq!(mock.calls(), 9);
    drop(llm);

    let llm = pipeline::open_llm(&m, mock.clone()).unwrap();
    pipeline::collect(&m, &llm).unwrap();
    assert_eq!(mock.calls(), 9);
    let collection = fs::read_to_string(m.output_dir.join(pipeline::COLLECTION_FILE)).unwrap();
    assert_eq!(collection.lines().count(), 3);
}

#[test]
fn interrupted_collect_resumes_with_remaining_items_only() {
    let dir = tempfile::tempdir().unwrap();
    let m = setup(dir.path(), 3, &[MetricName::FCertain, MetricName::FUncertain]);
    let full = script(&m);

    // Drop every rule for the last item so its requests fail.
    let mut partial = full.clone();
    partial.rules.retain(|r: &MockRule| !r.contains.contains("number 2?"));
    let broken = Arc::new(ScriptedMock::new(partial));
    let llm = pipeline::open_llm(&m, broken.clone()).unwrap();
    match pipeline::collect(&m, &llm) {
        Err(PipelineError::Gateway { item_id, stage, .. }) => {
            assert_eq!(item_id, "syn-0002");
            assert_eq!(stage, "reference");
        }
        other => panic!("{other:?}"),
    }
    drop(llm);

    let mock = Arc::new(ScriptedMock::new(full));
    let llm = pipeline::open_llm(&m, mock.clone()).unwrap();
    pipeline::collect(&m, &llm).unwrap();
    assert_eq!(mock.calls(), 3);
}

#[test]
fn selfcheck_stage_requests_eight_samples_at_half_temperature() {
    let dir = tempfile::tempdir().unwrap();
    let m = setup(dir.path(), 1, &[MetricName::FCertain, MetricName::FUncertain, MetricName::SelfCheckNli]);
    let rec = Arc::new(Recording {
        inner: ScriptedMock::new(script(&m)),
        log: Mutex::new(Vec::new()),
    });
    let llm = pipeline::open_llm(&m, rec.clone()).unwrap();
    pipeline::collect(&m, &llm).unwrap();
    let log = rec.log.lock().unwrap();
    let sampled: Vec<_> = log.iter().filter(|(p, _)| !p.is_greedy()).collect();
    assert_eq!(sampled.len(), 1);
    assert_eq!(sampled[0].0.temperature, 0.5);
    assert_eq!(sampled[0].1, (0..8).collect::<Vec<u32>>());
}

#[test]
fn score_ensemble_is_min_and_missing_samples_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = setup(dir.path(), 4, &[MetricName::FCertain, MetricName::FUncertain, MetricName::FEnsemble]);
    let mock = Arc::new(ScriptedMock::new(script(&m)));
    let llm = pipeline::open_llm(&m, mock.clone()).unwrap();
    pipeline::collect(&m, &llm).unwrap();
    let nli = pipeline::open_nli(&m, nli_mock()).unwrap();
    let scores = pipeline::score(&m, &llm, &nli).unwrap();
    assert_eq!(scores.len(), 12);
    for chunk in scores.chunks(3) {
        let get = |name| chunk.iter().find(|s: &&DetectionScore| s.metric_name == name).unwrap().value;
        assert_eq!(get(MetricName::FEnsemble), get(MetricName::FCertain).min(get(MetricName::FUncertain)));
    }
    assert_eq!(scores[0].value, -18.0);
    assert_eq!(scores[3].value, 16.0);

    let calls = mock.calls();
    m.metrics.push(MetricName::Entropy);
    match pipeline::score(&m, &llm, &nli) {
        Err(PipelineError::MissingGeneration { item_id, stage }) => {
            assert_eq!(item_id, "syn-0000");
            assert_eq!(stage, "sampling:standard");
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(mock.calls(), calls);
}

#[test]
fn baselines_score_from_collected_samples() {
    let dir = tempfile::tempdir().unwrap();
    let m = setup(dir.path(), 4, &MetricName::ALL);
    let llm = pipeline::open_llm(&m, Arc::new(ScriptedMock::new(script(&m)))).unwrap();
    let s = pipeline::collect(&m, &llm).unwrap();
    // standard + two expressions for sampling, plus selfcheck, per item.
    assert_eq!(s.sample_sets, 4 * 4);
    let nli = pipeline::open_nli(&m, nli_mock()).unwrap();
    let scores = pipeline::score(&m, &llm, &nli).unwrap();
    assert_eq!(scores.len(), 4 * 8);
    let v = |id: &str, name| {
        scores
            .iter()
            .find(|s| s.item_id == id && s.metric_name == name)
            .unwrap()
            .value
    };
    assert_eq!(v("syn-0000", MetricName::Entropy), 0.0);
    assert!(v("syn-0001", MetricName::Entropy) > 1.0);
    assert_eq!(v("syn-0000", MetricName::LexicalSimilarity), 1.0);
    assert!(v("syn-0001", MetricName::SemanticEntropy) > 0.0);
    assert!(v("syn-0000", MetricName::SelfCheckNli) < 0.01);
    assert!(v("syn-0001", MetricName::SelfCheckNli) > 0.5);

    let summary = pipeline::evaluate(&m, None).unwrap();
    assert_eq!(summary.metrics.len(), 8);
    for r in &summary.metrics {
        assert_eq!(r.auroc, 1.0, "{}", r.metric_name);
    }
}

#[test]
fn eval_writes_curves_and_flags_proxy_consistency() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = setup(dir.path(), 6, &[MetricName::FCertain, MetricName::FUncertain, MetricName::FEnsemble]);
    m.svg = true;
    let llm = pipeline::open_llm(&m, Arc::new(ScriptedMock::new(script(&m)))).unwrap();
    pipeline::collect(&m, &llm).unwrap();
    let nli = pipeline::open_nli(&m, nli_mock()).unwrap();
    pipeline::score(&m, &llm, &nli).unwrap();
    let summary = pipeline::evaluate(&m, None).unwrap();

    assert!(summary.metrics.iter().all(|r| r.auroc == 1.0 && r.auprc == 1.0));
    for name in ["f_certain", "f_uncertain", "f_ensemble"] {
        assert!(m.output_dir.join(format!("pr_curve_{name}.csv")).exists());
    }
    assert!(m.output_dir.join(pipeline::SVG_FILE).exists());
    let prov = summary.consistency_provenance.unwrap();
    assert_eq!((prov.manual, prov.nli_proxy), (0, 12));
    let b = summary.breakdown.unwrap();
    let f = b
        .rows
        .iter()
        .find(|r| r.expression_id == "mustbe" && r.group == hallucheck_core::eval::BreakdownGroup::Factual)
        .unwrap();
    assert_eq!((f.n, f.consistency_pct), (3, Some(100.0)));

    let reloaded = pipeline::load_report(&m.output_dir.join(pipeline::REPORT_FILE)).unwrap();
    assert_eq!(reloaded.metrics.len(), 3);
    let decisions = fs::read_to_string(m.output_dir.join(pipeline::DECISIONS_FILE)).unwrap();
    assert_eq!(decisions.lines().count(), 18);
}

#[test]
fn eval_requires_labels() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = setup(dir.path(), 2, &[MetricName::FCertain, MetricName::FUncertain]);
    m.labels_path = None;
    let llm = pipeline::open_llm(&m, Arc::new(ScriptedMock::new(script(&m)))).unwrap();
    pipeline::collect(&m, &llm).unwrap();
    let nli = pipeline::open_nli(&m, nli_mock()).unwrap();
    pipeline::score(&m, &llm, &nli).unwrap();
    assert!(matches!(
        pipeline::evaluate(&m, None),
        Err(PipelineError::Eval(hallucheck_core::eval::EvalError::MissingLabels(_)))
    ));
}

#[test]
fn subset_ids_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = setup(dir.path(), 10, &[MetricName::FCertain, MetricName::FUncertain]);
    m.subset = Some(hallucheck_core::manifest::SubsetSpec { seed: 5, size: 4 });
    let llm = pipeline::open_llm(&m, Arc::new(ScriptedMock::new(script(&m)))).unwrap();
    assert_eq!(pipeline::collect(&m, &llm).unwrap().items, 4);
    let run: pipeline::RunRecord =
        serde_json::from_str(&fs::read_to_string(m.output_dir.join(pipeline::RUN_FILE)).unwrap()).unwrap();
    assert_eq!(run.subset.unwrap().ids.len(), 4);
    assert_eq!(run.loaded, 10);
}

#[test]
fn triage_flags_neutral_references() {
    let dir = tempfile::tempdir().unwrap();
    let m = setup(dir.path(), 2, &[MetricName::FCertain, MetricName::FUncertain]);
    let llm = pipeline::open_llm(&m, Arc::new(ScriptedMock::new(script(&m)))).unwrap();
    pipeline::collect(&m, &llm).unwrap();
    let cfg = MockNliConfig {
        overrides: vec![hallucheck_core::nli::MockPairOverride {
            text_a: "Which city hosts synthetic landmark number 1? Alpha City 1".into(),
            text_b: "Which city hosts synthetic landmark number 1? Alpha City 1".into(),
            logits: [0.0, 4.0, 0.0],
        }],
        ..MockNliConfig::default()
    };
    let nli = pipeline::open_nli(&m, Arc::new(MockNli::new(cfg))).unwrap();
    let t = pipeline::triage(&m, &llm, &nli).unwrap();
    use hallucheck_core::eval::TriageOutcome;
    assert_eq!(
        t[0].outcome,
        TriageOutcome::AutoKeep {
            suggestion: hallucheck_core::FactualityLabel::Factual
        }
    );
    assert_eq!(t[1].outcome, TriageOutcome::NeedsHuman);
}
