use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use hallucheck_core::eval::{auprc, auroc};
use hallucheck_core::detectors::rouge_l;
use hallucheck_core::manifest::ExperimentManifest;
use hallucheck_core::metrics::{entropy_of_texts, histogram_kl};
use hallucheck_core::nli::{MockNli, MockNliConfig};
use hallucheck_core::pipeline;
use hallucheck_core::synthetic::{synthetic_fixture, write_fixture};
use hallucheck_core::llm::ScriptedMock;
use hallucheck_core::MetricName;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn labeled(n: usize, seed: u64) -> Vec<(f64, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let pos = rng.gen_bool(0.35);
            let shift = if pos { 0.8 } else { 0.0 };
            // Rounded so that ties occur.
            (((rng.gen::<f64>() + shift) * 100.0).round() / 100.0, pos)
        })
        .collect()
}

fn ranking(c: &mut Criterion) {
    let mut g = c.benchmark_group("ranking");
    for n in [1_000, 10_000, 100_000] {
        let data = labeled(n, 7);
        g.bench_with_input(BenchmarkId::new("auroc", n), &data, |b, d| b.iter(|| auroc(black_box(d)).unwrap()));
        g.bench_with_input(BenchmarkId::new("auprc", n), &data, |b, d| b.iter(|| auprc(black_box(d)).unwrap()));
    }
    g.finish();
}

fn text_metrics(c: &mut Criterion) {
    let a = "the eiffel tower was completed in 1889 for the paris world fair in france";
    let b = "it was finished for the world fair held in paris during 1889 by gustave eiffel";
    c.bench_function("rouge_l/15_tokens", |bch| bch.iter(|| rouge_l(black_box(a), black_box(b))));

    let texts: Vec<String> = (0..10).map(|i| format!("Answer {}", i % 4)).collect();
    c.bench_function("entropy_of_texts/10", |bch| {
        bch.iter(|| entropy_of_texts(black_box(texts.iter().map(String::as_str))).unwrap())
    });

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs: Vec<f64> = (0..500).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let ys: Vec<f64> = (0..500).map(|_| rng.gen_range(-2.0..5.0)).collect();
    c.bench_function("histogram_kl/500x500", |bch| {
        bch.iter(|| histogram_kl(black_box(&xs), black_box(&ys), 30, 1.0).unwrap())
    });
}

fn synthetic_pipeline(c: &mut Criterion) {
    let dir = std::env::temp_dir().join(format!("hallucheck-bench-{}", std::process::id()));
    let f = synthetic_fixture(200);
    let metrics = [MetricName::FCertain, MetricName::FUncertain, MetricName::FEnsemble];
    let path = write_fixture(&dir, &f, &MockNliConfig::default(), &metrics).unwrap();
    let m = ExperimentManifest::load(&path).unwrap();
    let llm = pipeline::open_llm(&m, Arc::new(ScriptedMock::new(f.script.clone()))).unwrap();
    pipeline::collect(&m, &llm).unwrap();
    let nli = pipeline::open_nli(&m, Arc::new(MockNli::new(MockNliConfig::default()))).unwrap();
    pipeline::score(&m, &llm, &nli).unwrap();

    let mut g = c.benchmark_group("synthetic_200");
    g.sample_size(20);
    g.bench_function("score_warm_cache", |b| b.iter(|| pipeline::score(&m, &llm, &nli).unwrap()));
    g.bench_function("evaluate", |b| b.iter(|| pipeline::evaluate(&m, None).unwrap()));
    g.finish();
    drop((llm, nli));
    let _ = std::fs::remove_dir_all(dir);
}

criterion_group!(benches, ranking, text_metrics, synthetic_pipeline);
criterion_main!(benches);
