//! Resumable collect, score and eval stages over a manifest. Stages talk
//! to each other only through the cache and the JSONL artifacts in the
//! output directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::concurrency::parallel_map;
use crate::corpus::{self, CorpusError};
use crate::detectors::{self, AbstentionPatterns, DetectorError};
use crate::eval::{self, Breakdown, EvalError, EvalReport, ExpressionObservation, LabelSource, ThresholdNormalization, TriageOutcome};
use crate::llm::{CompletionBackend, GatewayError, LlmGateway};
use crate::manifest::{ExperimentManifest, ManifestError};
use crate::metrics::{self, DEFAULT_KL_BINS, DEFAULT_KL_SIGMA};
use crate::model::{ConsistencyLabel, DetectionScore, Expression, FactualityLabel, Generation, MetricName, QaItem};
use crate::nli::{NliError, NliGateway, NliScorer};
use crate::prompting::{join_expression_answer, PromptError, PromptRendering};
use crate::report;

pub const ITEMS_FILE: &str = "items.jsonl";
pub const COLLECTION_FILE: &str = "collection.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const OBSERVATIONS_FILE: &str = "observations.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.md";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const TRIAGE_FILE: &str = "triage.jsonl";
pub const SVG_FILE: &str = "pr_curve.svg";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Artifact { path: PathBuf, line: usize, message: String },
    #[error("item `{item_id}`, stage {stage}: {source}")]
    Gateway {
        item_id: String,
        stage: String,
        #[source]
        source: GatewayError,
    },
    #[error("item `{item_id}`: generation for stage {stage} is not cached; run collect first")]
    MissingGeneration { item_id: String, stage: String },
    #[error("item `{item_id}`, metric {metric}: {source}")]
    Detector {
        item_id: String,
        metric: String,
        #[source]
        source: DetectorError,
    },
    #[error("item `{item_id}`: {source}")]
    Prompt {
        item_id: String,
        #[source]
        source: PromptError,
    },
    #[error(transparent)]
    Llm(#[from] GatewayError),
    #[error(transparent)]
    Nli(#[from] NliError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_owned(),
        source,
    }
}

fn write_file(path: &Path, body: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, body).map_err(io_err(path))
}

fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).expect("artifact rows serialize"));
        s.push('\n');
    }
    s
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Artifact {
                path: path.to_owned(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Runtime

pub fn open_llm(m: &ExperimentManifest, backend: Arc<dyn CompletionBackend>) -> Result<LlmGateway, PipelineError> {
    Ok(LlmGateway::open(backend, &m.cache_dir(), m.backend.max_in_flight)?)
}

pub fn open_nli(m: &ExperimentManifest, scorer: Arc<dyn NliScorer>) -> Result<NliGateway, PipelineError> {
    Ok(NliGateway::open(scorer, &m.cache_dir(), m.nli.max_in_flight)?.with_join(&m.nli.join))
}

/// Gateways built from the manifest's backend configurations.
pub fn open_configured_llm(m: &ExperimentManifest) -> Result<LlmGateway, PipelineError> {
    open_llm(m, m.backend.build()?)
}

pub fn open_configured_nli(m: &ExperimentManifest) -> Result<NliGateway, PipelineError> {
    open_nli(m, m.nli.build()?)
}

// ---------------------------------------------------------------------------
// Item preparation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetRecord {
    pub seed: u64,
    pub size: usize,
    pub ids: Vec<String>,
}

/// Provenance of the prepared item list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub backend_id: String,
    pub loaded: usize,
    pub excluded: usize,
    pub unknown_exclusion_ids: Vec<String>,
    pub unknown_label_ids: Vec<String>,
    pub items: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<SubsetRecord>,
}

/// Loads the corpus, then applies exclusions, the seeded subset and labels.
pub fn prepare_items(m: &ExperimentManifest) -> Result<(Vec<QaItem>, RunRecord), PipelineError> {
    let items = corpus::load_corpus(&m.corpus_path, m.corpus_format)?;
    let loaded = items.len();
    let exclusion_ids = match &m.exclusions_path {
        Some(p) => corpus::read_id_list(p)?,
        None => Vec::new(),
    };
    let ex = corpus::apply_exclusions(items, &exclusion_ids);
    let (items, subset) = match m.subset {
        Some(s) => {
            let chosen = corpus::sample_subset(ex.items, s.seed, s.size);
            let ids = chosen.iter().map(|i| i.id.clone()).collect();
            (
                chosen,
                Some(SubsetRecord {
                    seed: s.seed,
                    size: s.size,
                    ids,
                }),
            )
        }
        None => (ex.items, None),
    };
    let (items, unknown_label_ids) = match &m.labels_path {
        Some(p) => {
            let merged = corpus::merge_labels(items, p)?;
            (merged.items, merged.unknown_ids)
        }
        None => (items, Vec::new()),
    };
    let record = RunRecord {
        backend_id: String::new(),
        loaded,
        excluded: ex.excluded,
        unknown_exclusion_ids: ex.unknown_ids,
        unknown_label_ids,
        items: items.len(),
        subset,
    };
    Ok((items, record))
}

struct ItemPrompts {
    standard: PromptRendering,
    expressions: Vec<(Expression, PromptRendering)>,
}

fn prompts_for(m: &ExperimentManifest, exprs: &[Expression], item: &QaItem) -> Result<ItemPrompts, PipelineError> {
    let wrap = |source| PipelineError::Prompt {
        item_id: item.id.clone(),
        source,
    };
    let standard = m.prompts.render_standard(item).map_err(wrap)?;
    let expressions = exprs
        .iter()
        .map(|e| Ok((e.clone(), m.prompts.render_expression(item, e).map_err(wrap)?)))
        .collect::<Result<_, PipelineError>>()?;
    Ok(ItemPrompts { standard, expressions })
}

// ---------------------------------------------------------------------------
// Collect

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionRecord {
    pub item_id: String,
    pub reference: Generation,
    /// Expression-prompt generations keyed by expression id.
    pub expressions: BTreeMap<String, Generation>,
    pub sample_sets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectSummary {
    pub items: usize,
    pub generations: usize,
    pub sample_sets: usize,
}

fn collect_item(m: &ExperimentManifest, exprs: &[Expression], llm: &LlmGateway, item: &QaItem) -> Result<CollectionRecord, PipelineError> {
    let p = prompts_for(m, exprs, item)?;
    let d = &m.decoding;
    let stage_err = |stage: String| {
        let id = item.id.clone();
        move |source| PipelineError::Gateway {
            item_id: id,
            stage,
            source,
        }
    };
    let reference = llm.complete(&p.standard, &d.reference).map_err(stage_err("reference".into()))?;
    let mut expressions = BTreeMap::new();
    let mut sample_sets = 0;
    for (e, prompt) in &p.expressions {
        let g = llm
            .complete(prompt, &d.expression)
            .map_err(stage_err(format!("expression:{}", e.id)))?;
        expressions.insert(e.id.clone(), g);
    }
    if m.wants_sampling() {
        llm.sample_n(&p.standard, &d.sampling, d.sampling.n_samples)
            .map_err(stage_err("sampling:standard".into()))?;
        sample_sets += 1;
        for (e, prompt) in &p.expressions {
            llm.sample_n(prompt, &d.sampling, d.sampling.n_samples)
                .map_err(stage_err(format!("sampling:{}", e.id)))?;
            sample_sets += 1;
        }
    }
    if m.wants(MetricName::SelfCheckNli) {
        llm.sample_n(&p.standard, &d.selfcheck, d.selfcheck.n_samples)
            .map_err(stage_err("selfcheck".into()))?;
        sample_sets += 1;
    }
    Ok(CollectionRecord {
        item_id: item.id.clone(),
        reference,
        expressions,
        sample_sets,
    })
}

/// Collects every generation the configured metrics need. Work fans out up
/// to the backend's in-flight limit; cached generations are reused, so a
/// rerun after an interruption only fetches what is missing.
pub fn collect(m: &ExperimentManifest, llm: &LlmGateway) -> Result<CollectSummary, PipelineError> {
    let (items, mut run) = prepare_items(m)?;
    run.backend_id = llm.backend_id().to_owned();
    let exprs = m.resolved_expressions()?;
    write_file(&m.output_dir.join(ITEMS_FILE), &corpus::items_to_jsonl(&items))?;
    write_file(
        &m.output_dir.join(RUN_FILE),
        &(serde_json::to_string_pretty(&run).expect("run record serializes") + "\n"),
    )?;

    let results = parallel_map(&items, llm.max_in_flight(), |item| collect_item(m, &exprs, llm, item));
    llm.flush()?;

    let mut records = Vec::with_capacity(results.len());
    let mut first_err = None;
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                log::error!("{e}");
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    records.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    write_file(&m.output_dir.join(COLLECTION_FILE), &to_jsonl(&records))?;
    Ok(CollectSummary {
        items: records.len(),
        generations: records.iter().map(|r| 1 + r.expressions.len()).sum(),
        sample_sets: records.iter().map(|r| r.sample_sets).sum(),
    })
}

// ---------------------------------------------------------------------------
// Score

/// Loads the item list written by `collect`.
pub fn load_collected_items(m: &ExperimentManifest) -> Result<Vec<QaItem>, PipelineError> {
    Ok(corpus::load_items_jsonl(&m.output_dir.join(ITEMS_FILE))?)
}

struct ScoreCtx<'a> {
    m: &'a ExperimentManifest,
    exprs: Vec<Expression>,
    llm: &'a LlmGateway,
    nli: &'a NliGateway,
    abstention: AbstentionPatterns,
}

type ItemScores = (Vec<DetectionScore>, Vec<ExpressionObservation>);

fn score_item(ctx: &ScoreCtx, item: &QaItem) -> Result<ItemScores, PipelineError> {
    let m = ctx.m;
    let d = &m.decoding;
    let p = prompts_for(m, &ctx.exprs, item)?;
    let missing = |stage: &str| PipelineError::MissingGeneration {
        item_id: item.id.clone(),
        stage: stage.to_owned(),
    };
    let det = |metric: &str| {
        let id = item.id.clone();
        let metric = metric.to_owned();
        move |source: DetectorError| PipelineError::Detector {
            item_id: id,
            metric,
            source,
        }
    };
    let reference = ctx
        .llm
        .cached(&p.standard.text, &d.reference, 0)
        .ok_or_else(|| missing("reference"))?;

    let mut needed: Vec<&str> = Vec::new();
    if m.wants(MetricName::FCertain) {
        needed.push(&m.certain_expression);
    }
    if m.wants(MetricName::FUncertain) {
        needed.push(&m.uncertain_expression);
    }
    if m.wants(MetricName::FEnsemble) {
        needed.extend(m.ensemble.iter().map(String::as_str));
    }
    if m.breakdown {
        needed.extend(ctx.exprs.iter().map(|e| e.id.as_str()));
    }

    let mut f_by_expr: HashMap<&str, f64> = HashMap::new();
    let mut observations = Vec::new();
    for (e, prompt) in &p.expressions {
        if !needed.contains(&e.id.as_str()) {
            continue;
        }
        let stage = format!("expression:{}", e.id);
        let gen = ctx.llm.cached(&prompt.text, &d.expression, 0).ok_or_else(|| missing(&stage))?;
        let perturbed = join_expression_answer(&e.text, &gen.text);
        let input = ctx
            .nli
            .input(&item.question, &reference.text, &perturbed)
            .map_err(|err| det(&stage)(err.into()))?;
        let verdict = ctx.nli.score(&input).map_err(|err| det(&stage)(err.into()))?;
        f_by_expr.insert(e.id.as_str(), detectors::f_score_from_verdict(&verdict));

        if m.breakdown {
            let p1 = metrics::length_normalized_logprob(&reference).ok();
            let p2 = metrics::length_normalized_logprob(&gen).ok();
            let entropy = ctx
                .llm
                .cached_samples(&prompt.text, &d.sampling, d.sampling.n_samples)
                .and_then(|s| metrics::response_entropy(&s).ok());
            observations.push(ExpressionObservation {
                item_id: item.id.clone(),
                expression_id: e.id.clone(),
                consistency: Some(if verdict.logit_entailment > verdict.logit_contradiction {
                    ConsistencyLabel::Consistent
                } else {
                    ConsistencyLabel::NonConsistent
                }),
                logprob_ratio: p1.zip(p2).map(|(a, b)| metrics::logprob_ratio(a, b)),
                entropy,
                response_factual: None,
                abstained: ctx.abstention.matches(&perturbed),
                reference_logp: p1.map(|x| x.value()),
            });
        }
    }

    let standard_samples = |params, n, stage: &str| {
        ctx.llm
            .cached_samples(&p.standard.text, params, n)
            .ok_or_else(|| missing(stage))
    };

    let mut scores = Vec::new();
    for metric in MetricName::ALL {
        if !m.wants(metric) {
            continue;
        }
        let name = metric.as_str();
        let value = match metric {
            MetricName::FCertain => f_by_expr[m.certain_expression.as_str()],
            MetricName::FUncertain => f_by_expr[m.uncertain_expression.as_str()],
            MetricName::FEnsemble => {
                let fs: Vec<f64> = m.ensemble.iter().map(|id| f_by_expr[id.as_str()]).collect();
                detectors::f_ensemble(&fs).map_err(det(name))?
            }
            MetricName::LogP => detectors::baseline_logp(&reference).map_err(det(name))?,
            MetricName::Entropy => {
                let s = standard_samples(&d.sampling, d.sampling.n_samples, "sampling:standard")?;
                detectors::baseline_entropy(&s).map_err(det(name))?
            }
            MetricName::SemanticEntropy => {
                let s = standard_samples(&d.sampling, d.sampling.n_samples, "sampling:standard")?;
                let clusters = detectors::cluster_semantic(ctx.nli, &item.question, &s).map_err(det(name))?;
                detectors::semantic_entropy(&clusters).map_err(det(name))?
            }
            MetricName::LexicalSimilarity => {
                let s = standard_samples(&d.sampling, d.sampling.n_samples, "sampling:standard")?;
                detectors::lexical_similarity(&s).map_err(det(name))?
            }
            MetricName::SelfCheckNli => {
                let s = standard_samples(&d.selfcheck, d.selfcheck.n_samples, "selfcheck")?;
                detectors::selfcheck_nli(ctx.nli, &item.question, &reference.text, &s).map_err(det(name))?
            }
        };
        scores.push(DetectionScore::new(item.id.clone(), metric, value));
    }
    Ok((scores, observations))
}

fn metric_rank(m: MetricName) -> usize {
    MetricName::ALL.iter().position(|x| *x == m).expect("listed")
}

/// Scores every collected item from the cache alone; the completion
/// backend is never called. Writes `scores.jsonl` (and
/// `observations.jsonl` when breakdowns are enabled), sorted by item id.
pub fn score(m: &ExperimentManifest, llm: &LlmGateway, nli: &NliGateway) -> Result<Vec<DetectionScore>, PipelineError> {
    let items = load_collected_items(m)?;
    let abstention = match &m.abstention_patterns_path {
        Some(p) => AbstentionPatterns::from_file(p).map_err(io_err(p))?,
        None => AbstentionPatterns::default(),
    };
    let ctx = ScoreCtx {
        m,
        exprs: m.resolved_expressions()?,
        llm,
        nli,
        abstention,
    };
    let results = parallel_map(&items, m.nli.max_in_flight, |item| score_item(&ctx, item));
    nli.flush()?;

    let mut scores = Vec::new();
    let mut observations = Vec::new();
    for r in results {
        let (s, o) = r?;
        scores.extend(s);
        observations.extend(o);
    }
    scores.sort_by(|a, b| {
        a.item_id
            .cmp(&b.item_id)
            .then(metric_rank(a.metric_name).cmp(&metric_rank(b.metric_name)))
    });
    let expr_rank: HashMap<&str, usize> = m.expressions.iter().enumerate().map(|(i, e)| (e.as_str(), i)).collect();
    observations.sort_by(|a, b| {
        a.item_id
            .cmp(&b.item_id)
            .then(expr_rank[a.expression_id.as_str()].cmp(&expr_rank[b.expression_id.as_str()]))
    });
    write_file(&m.output_dir.join(SCORES_FILE), &to_jsonl(&scores))?;
    if m.breakdown {
        write_file(&m.output_dir.join(OBSERVATIONS_FILE), &to_jsonl(&observations))?;
    }
    Ok(scores)
}

// ---------------------------------------------------------------------------
// Eval

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyProvenance {
    pub manual: usize,
    pub nli_proxy: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlRow {
    pub expression_id: String,
    pub n_factual: usize,
    pub n_nonfactual: usize,
    /// KL(factual ‖ non-factual) over log-probability ratios.
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub metrics: Vec<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<Breakdown>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency_provenance: Option<ConsistencyProvenance>,
    #[serde(default)]
    pub histogram_kl: Vec<KlRow>,
    pub threshold: f64,
    pub threshold_normalization: ThresholdNormalization,
}

impl EvalSummary {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("## Detection\n\n");
        s.push_str(&report::metrics_table(&self.metrics));
        if let Some(b) = &self.breakdown {
            s.push_str("\n## Breakdown\n\n");
            if let Some(p) = self.consistency_provenance {
                s.push_str(&format!(
                    "Consistency labels: {} manual, {} from the NLI proxy.\n\n",
                    p.manual, p.nli_proxy
                ));
            }
            s.push_str(&report::breakdown_tables(b));
        }
        if !self.histogram_kl.is_empty() {
            s.push_str("\n## Histogram KL (factual vs non-factual log p ratio)\n\n| Expression | n F | n NF | KL |\n|---|---|---|---|\n");
            for k in &self.histogram_kl {
                s.push_str(&format!("| {} | {} | {} | {:.4} |\n", k.expression_id, k.n_factual, k.n_nonfactual, k.kl));
            }
        }
        s
    }
}

fn consistency_map(obs: &[ExpressionObservation], expression_id: &str) -> HashMap<String, ConsistencyLabel> {
    obs.iter()
        .filter(|o| o.expression_id == expression_id)
        .filter_map(|o| o.consistency.map(|c| (o.item_id.clone(), c)))
        .collect()
}

/// Evaluates a score file against the collected items and their labels.
/// Labels are re-read from `labels_path` when configured, so they can be
/// added after collection.
pub fn evaluate(m: &ExperimentManifest, scores_path: Option<&Path>) -> Result<EvalSummary, PipelineError> {
    let mut items = load_collected_items(m)?;
    if let Some(p) = &m.labels_path {
        items = corpus::merge_labels(items, p)?.items;
    }
    let default_scores = m.output_dir.join(SCORES_FILE);
    let scores: Vec<DetectionScore> = read_jsonl(scores_path.unwrap_or(&default_scores))?;

    let obs_path = m.output_dir.join(OBSERVATIONS_FILE);
    let mut observations: Vec<ExpressionObservation> = if m.breakdown && obs_path.exists() {
        read_jsonl(&obs_path)?
    } else {
        Vec::new()
    };
    let by_id: HashMap<String, &QaItem> = items.iter().map(|i| (i.id.clone(), i)).collect();
    let mut provenance = ConsistencyProvenance::default();
    for o in &mut observations {
        let Some(item) = by_id.get(&o.item_id) else { continue };
        let proxy = o.consistency;
        let (label, source) = eval::resolve_consistency(item, &o.expression_id, || {
            Ok(proxy.unwrap_or(ConsistencyLabel::NonConsistent))
        })?;
        o.consistency = Some(label);
        match source {
            LabelSource::Manual => provenance.manual += 1,
            LabelSource::NliProxy => provenance.nli_proxy += 1,
        }
        o.response_factual = item
            .response_factuality
            .as_ref()
            .and_then(|r| r.get(&o.expression_id))
            .map(|f| *f == FactualityLabel::Factual);
    }

    let mut reports = Vec::new();
    let mut decisions = Vec::new();
    for metric in MetricName::ALL {
        let subset: Vec<DetectionScore> = scores.iter().filter(|s| s.metric_name == metric).cloned().collect();
        if subset.is_empty() {
            continue;
        }
        let mut r = eval::evaluate_metric(metric, &subset, &items)?;
        let cons = match metric {
            MetricName::FCertain => Some(consistency_map(&observations, &m.certain_expression)),
            MetricName::FUncertain => Some(consistency_map(&observations, &m.uncertain_expression)),
            _ => None,
        };
        r.breakdowns = Some(eval::metric_group_means(&subset, &items, cons.as_ref().filter(|c| !c.is_empty())));
        decisions.extend(eval::threshold_decisions(&subset, m.threshold_normalization, m.threshold));
        reports.push(r);
    }

    let (breakdown, consistency_provenance, histogram_kl) = if m.breakdown && !observations.is_empty() {
        let b = eval::group_breakdown(&items, &observations)?;
        let mut kl = Vec::new();
        for e in &m.expressions {
            let ratios = |want: FactualityLabel| -> Vec<f64> {
                observations
                    .iter()
                    .filter(|o| &o.expression_id == e)
                    .filter(|o| by_id.get(&o.item_id).and_then(|i| i.factuality_label) == Some(want))
                    .filter_map(|o| o.logprob_ratio)
                    .collect()
            };
            let (f, nf) = (ratios(FactualityLabel::Factual), ratios(FactualityLabel::NonFactual));
            if let Ok(v) = metrics::histogram_kl(&f, &nf, DEFAULT_KL_BINS, DEFAULT_KL_SIGMA) {
                kl.push(KlRow {
                    expression_id: e.clone(),
                    n_factual: f.len(),
                    n_nonfactual: nf.len(),
                    kl: v,
                });
            }
        }
        (Some(b), Some(provenance), kl)
    } else {
        (None, None, Vec::new())
    };

    let summary = EvalSummary {
        metrics: reports,
        breakdown,
        consistency_provenance,
        histogram_kl,
        threshold: m.threshold,
        threshold_normalization: m.threshold_normalization,
    };
    let out = &m.output_dir;
    write_file(
        &out.join(REPORT_FILE),
        &(serde_json::to_string_pretty(&summary).expect("report serializes") + "\n"),
    )?;
    for r in &summary.metrics {
        write_file(&out.join(format!("pr_curve_{}.csv", r.metric_name)), &report::pr_curve_csv(r))?;
    }
    if m.svg {
        write_file(&out.join(SVG_FILE), &report::pr_curve_svg(&summary.metrics))?;
    }
    write_file(&out.join(DECISIONS_FILE), &to_jsonl(&decisions))?;
    write_file(&out.join(SUMMARY_FILE), &summary.to_markdown())?;
    Ok(summary)
}

/// Reads a previously written report.
pub fn load_report(path: &Path) -> Result<EvalSummary, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Artifact {
        path: path.to_owned(),
        line: e.line(),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Annotation triage

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageRecord {
    pub item_id: String,
    pub reference: String,
    #[serde(flatten)]
    pub outcome: TriageOutcome,
}

/// Compares each cached reference with the gold answers and writes
/// `triage.jsonl`, flagging items whose verdict is neutral for a human.
pub fn triage(m: &ExperimentManifest, llm: &LlmGateway, nli: &NliGateway) -> Result<Vec<TriageRecord>, PipelineError> {
    let items = load_collected_items(m)?;
    let mut out = Vec::with_capacity(items.len());
    for item in &items {
        let standard = m.prompts.render_standard(item).map_err(|source| PipelineError::Prompt {
            item_id: item.id.clone(),
            source,
        })?;
        let reference = llm
            .cached(&standard.text, &m.decoding.reference, 0)
            .ok_or_else(|| PipelineError::MissingGeneration {
                item_id: item.id.clone(),
                stage: "reference".into(),
            })?;
        let outcome = if reference.text.trim().is_empty() {
            TriageOutcome::NeedsHuman
        } else {
            eval::triage_item(nli, item, &reference.text)?
        };
        out.push(TriageRecord {
            item_id: item.id.clone(),
            reference: reference.text,
            outcome,
        });
    }
    nli.flush()?;
    out.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    write_file(&m.output_dir.join(TRIAGE_FILE), &to_jsonl(&out))?;
    Ok(out)
}
