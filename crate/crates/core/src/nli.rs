//! NLI input construction and the scoring gateway.
//!
//! Pairs are question-prefixed on both sides. Scorers return raw logits in
//! (entailment, neutral, contradiction) order; the gateway caches verdicts
//! keyed by the scorer's model version.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheError, SegmentCache};
use crate::concurrency::InFlightLimiter;
use crate::llm::fingerprint;
use crate::metrics::normalize_answer;
use crate::model::NliVerdict;

pub const DEFAULT_JOIN: &str = " ";

#[derive(Debug, Error)]
pub enum NliError {
    #[error("NLI input field `{0}` is empty")]
    EmptyField(&'static str),
    #[error("NLI scorer unreachable: {0}")]
    ScorerUnreachable(String),
    #[error("malformed NLI scorer reply: {0}")]
    MalformedScorerReply(String),
    #[error("NLI configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// An ordered pair for the NLI scorer. Only `text_a` and `text_b` go on the
/// wire; the separator token is inserted by the scorer's tokenizer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NliInput {
    pub text_a: String,
    pub text_b: String,
    /// Byte length of the shared question prefix (including the join).
    #[serde(skip)]
    prefix_len: usize,
}

impl NliInput {
    /// A pair without a known question prefix.
    pub fn raw(text_a: impl Into<String>, text_b: impl Into<String>) -> Self {
        Self {
            text_a: text_a.into(),
            text_b: text_b.into(),
            prefix_len: 0,
        }
    }

    pub fn question(&self) -> &str {
        self.text_a[..self.prefix_len].trim_end()
    }

    pub fn answer_a(&self) -> &str {
        &self.text_a[self.prefix_len..]
    }

    pub fn answer_b(&self) -> &str {
        &self.text_b[self.prefix_len..]
    }

    /// The same pair with sides swapped.
    pub fn reversed(&self) -> Self {
        Self {
            text_a: self.text_b.clone(),
            text_b: self.text_a.clone(),
            prefix_len: self.prefix_len,
        }
    }

    fn cache_fingerprint(&self) -> String {
        fingerprint(&format!("{}\u{1f}{}", self.text_a, self.text_b))
    }
}

/// Builds `question + join + reference` / `question + join + candidate`.
pub fn build_nli_input_with(join: &str, question: &str, reference: &str, candidate: &str) -> Result<NliInput, NliError> {
    let question = question.trim();
    let reference = reference.trim();
    let candidate = candidate.trim();
    if question.is_empty() {
        return Err(NliError::EmptyField("question"));
    }
    if reference.is_empty() {
        return Err(NliError::EmptyField("reference"));
    }
    if candidate.is_empty() {
        return Err(NliError::EmptyField("candidate"));
    }
    let prefix = format!("{question}{join}");
    Ok(NliInput {
        text_a: format!("{prefix}{reference}"),
        text_b: format!("{prefix}{candidate}"),
        prefix_len: prefix.len(),
    })
}

pub fn build_nli_input(question: &str, reference: &str, candidate: &str) -> Result<NliInput, NliError> {
    build_nli_input_with(DEFAULT_JOIN, question, reference, candidate)
}

pub trait NliScorer: Send + Sync {
    /// Included in cache keys; changing checkpoints invalidates the cache.
    fn model_version(&self) -> String;

    /// Verdicts in input order.
    fn score_pairs(&self, inputs: &[NliInput]) -> Result<Vec<NliVerdict>, NliError>;
}

// ---------------------------------------------------------------------------
// HTTP sidecar client

#[derive(Serialize)]
struct WirePair<'a> {
    text_a: &'a str,
    text_b: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    pairs: Vec<WirePair<'a>>,
}

#[derive(Deserialize)]
struct WireVerdict {
    entailment: f64,
    neutral: f64,
    contradiction: f64,
}

#[derive(Deserialize)]
struct WireReply {
    model_version: String,
    verdicts: Vec<WireVerdict>,
}

#[derive(Deserialize)]
struct Health {
    model_version: String,
}

pub struct HttpNliScorer {
    client: reqwest::blocking::Client,
    base: String,
    model_version: String,
    max_batch: usize,
    retry_limit: u32,
}

impl HttpNliScorer {
    /// Connects and reads the model version from `/healthz`.
    pub fn connect(config: &NliBackendConfig) -> Result<Self, NliError> {
        let endpoint = config
            .endpoint_url
            .as_deref()
            .ok_or_else(|| NliError::Config("Http NLI scorer requires endpoint_url".into()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| NliError::Config(e.to_string()))?;
        let base = endpoint.trim_end_matches('/').to_owned();
        let resp = client
            .get(format!("{base}/healthz"))
            .send()
            .map_err(|e| NliError::ScorerUnreachable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(NliError::ScorerUnreachable(format!("healthz returned {}", resp.status())));
        }
        let body = resp.text().map_err(|e| NliError::ScorerUnreachable(e.to_string()))?;
        let model_version = match serde_json::from_str::<Health>(&body) {
            Ok(h) => h.model_version,
            Err(_) if !body.trim().is_empty() => body.trim().to_owned(),
            Err(_) => return Err(NliError::MalformedScorerReply("healthz carried no model_version".into())),
        };
        Ok(Self {
            client,
            base,
            model_version,
            max_batch: config.max_batch.max(1),
            retry_limit: config.retry_limit,
        })
    }

    fn post_chunk(&self, chunk: &[NliInput]) -> Result<Vec<NliVerdict>, NliError> {
        let body = WireRequest {
            pairs: chunk
                .iter()
                .map(|p| WirePair {
                    text_a: &p.text_a,
                    text_b: &p.text_b,
                })
                .collect(),
        };
        let url = format!("{}/v1/nli", self.base);
        let mut last = String::new();
        for attempt in 0..=self.retry_limit {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(100 * (1 << (attempt - 1).min(6))));
            }
            let resp = match self.client.post(&url).json(&body).send() {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            let status = resp.status();
            if status.is_server_error() || status.as_u16() == 429 {
                last = format!("HTTP {status}");
                continue;
            }
            if !status.is_success() {
                return Err(NliError::MalformedScorerReply(format!("HTTP {status}")));
            }
            let reply: WireReply = resp.json().map_err(|e| NliError::MalformedScorerReply(e.to_string()))?;
            if reply.model_version != self.model_version {
                return Err(NliError::MalformedScorerReply(format!(
                    "model_version changed from {} to {}",
                    self.model_version, reply.model_version
                )));
            }
            if reply.verdicts.len() != chunk.len() {
                return Err(NliError::MalformedScorerReply(format!(
                    "sent {} pairs, got {} verdicts",
                    chunk.len(),
                    reply.verdicts.len()
                )));
            }
            return reply
                .verdicts
                .into_iter()
                .map(|v| {
                    let verdict = NliVerdict::new(v.entailment, v.neutral, v.contradiction);
                    if verdict.is_finite() {
                        Ok(verdict)
                    } else {
                        Err(NliError::MalformedScorerReply("non-finite logit".into()))
                    }
                })
                .collect();
        }
        Err(NliError::ScorerUnreachable(last))
    }
}

impl NliScorer for HttpNliScorer {
    fn model_version(&self) -> String {
        self.model_version.clone()
    }

    fn score_pairs(&self, inputs: &[NliInput]) -> Result<Vec<NliVerdict>, NliError> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(self.max_batch) {
            out.extend(self.post_chunk(chunk)?);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Mock scorer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockPairOverride {
    pub text_a: String,
    pub text_b: String,
    /// (entailment, neutral, contradiction)
    pub logits: [f64; 3],
}

/// Rule-based scorer: answers equal after normalization entail each other,
/// anything else contradicts. Questions listed in `flip_questions` get the
/// opposite verdict, and exact-pair overrides take precedence over both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockNliConfig {
    #[serde(default = "default_mock_version")]
    pub model_version: String,
    #[serde(default = "default_entail")]
    pub entail_logits: [f64; 3],
    #[serde(default = "default_contradict")]
    pub contradict_logits: [f64; 3],
    #[serde(default)]
    pub flip_questions: Vec<String>,
    #[serde(default)]
    pub overrides: Vec<MockPairOverride>,
}

fn default_mock_version() -> String {
    "mock-nli-v1".to_owned()
}
fn default_entail() -> [f64; 3] {
    [9.0, 0.0, -9.0]
}
fn default_contradict() -> [f64; 3] {
    [-8.0, -1.0, 8.0]
}

impl Default for MockNliConfig {
    fn default() -> Self {
        Self {
            model_version: default_mock_version(),
            entail_logits: default_entail(),
            contradict_logits: default_contradict(),
            flip_questions: Vec::new(),
            overrides: Vec::new(),
        }
    }
}

pub struct MockNli {
    config: MockNliConfig,
    flips: HashSet<String>,
    overrides: HashMap<(String, String), [f64; 3]>,
    pairs_scored: AtomicUsize,
}

impl MockNli {
    pub fn new(config: MockNliConfig) -> Self {
        let flips = config.flip_questions.iter().map(|q| q.trim().to_owned()).collect();
        let overrides = config
            .overrides
            .iter()
            .map(|o| ((o.text_a.clone(), o.text_b.clone()), o.logits))
            .collect();
        Self {
            config,
            flips,
            overrides,
            pairs_scored: AtomicUsize::new(0),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, NliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NliError::Config(format!("reading NLI mock {}: {e}", path.display())))?;
        let config = serde_json::from_str(&text)
            .map_err(|e| NliError::Config(format!("parsing NLI mock {}: {e}", path.display())))?;
        Ok(Self::new(config))
    }

    /// Number of pairs the mock has been asked to score.
    pub fn pairs_scored(&self) -> usize {
        self.pairs_scored.load(Ordering::SeqCst)
    }

    fn verdict(&self, input: &NliInput) -> NliVerdict {
        if let Some(l) = self.overrides.get(&(input.text_a.clone(), input.text_b.clone())) {
            return NliVerdict::new(l[0], l[1], l[2]);
        }
        let mut same = normalize_answer(input.answer_a()) == normalize_answer(input.answer_b());
        if self.flips.contains(input.question()) {
            same = !same;
        }
        let l = if same {
            self.config.entail_logits
        } else {
            self.config.contradict_logits
        };
        NliVerdict::new(l[0], l[1], l[2])
    }
}

impl NliScorer for MockNli {
    fn model_version(&self) -> String {
        self.config.model_version.clone()
    }

    fn score_pairs(&self, inputs: &[NliInput]) -> Result<Vec<NliVerdict>, NliError> {
        self.pairs_scored.fetch_add(inputs.len(), Ordering::SeqCst);
        Ok(inputs.iter().map(|i| self.verdict(i)).collect())
    }
}

// ---------------------------------------------------------------------------
// Configuration and gateway

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NliBackendKind {
    Http,
    Mock,
}

fn default_in_flight() -> usize {
    4
}
fn default_timeout() -> u64 {
    30_000
}
fn default_retries() -> u32 {
    3
}
fn default_batch() -> usize {
    32
}
fn default_join() -> String {
    DEFAULT_JOIN.to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliBackendConfig {
    pub kind: NliBackendKind,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default)]
    pub mock_path: Option<PathBuf>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retry_limit: u32,
    #[serde(default = "default_batch")]
    pub max_batch: usize,
    /// Separator between the question and the answer on each side.
    #[serde(default = "default_join")]
    pub join: String,
}

impl NliBackendConfig {
    pub fn mock(mock_path: impl Into<PathBuf>) -> Self {
        Self {
            kind: NliBackendKind::Mock,
            endpoint_url: None,
            mock_path: Some(mock_path.into()),
            max_in_flight: default_in_flight(),
            timeout_ms: default_timeout(),
            retry_limit: default_retries(),
            max_batch: default_batch(),
            join: default_join(),
        }
    }

    pub fn validate(&self) -> Result<(), NliError> {
        if self.max_in_flight == 0 || self.max_batch == 0 {
            return Err(NliError::Config("max_in_flight and max_batch must be at least 1".into()));
        }
        match self.kind {
            NliBackendKind::Http if self.endpoint_url.is_none() => Err(NliError::Config("Http requires endpoint_url".into())),
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn NliScorer>, NliError> {
        self.validate()?;
        Ok(match self.kind {
            NliBackendKind::Http => Arc::new(HttpNliScorer::connect(self)?),
            NliBackendKind::Mock => match &self.mock_path {
                Some(p) => Arc::new(MockNli::from_file(p)?),
                None => Arc::new(MockNli::new(MockNliConfig::default())),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NliCacheKey {
    pub model_version: String,
    pub pair_fingerprint: String,
}

/// Caching front for an NLI scorer.
pub struct NliGateway {
    scorer: Arc<dyn NliScorer>,
    model_version: String,
    join: String,
    cache: SegmentCache<NliCacheKey, NliVerdict>,
    limiter: InFlightLimiter,
}

impl NliGateway {
    pub fn open(scorer: Arc<dyn NliScorer>, cache_dir: &Path, max_in_flight: usize) -> Result<Self, NliError> {
        let model_version = scorer.model_version();
        Ok(Self {
            scorer,
            model_version,
            join: DEFAULT_JOIN.to_owned(),
            cache: SegmentCache::open(cache_dir.join("nli"), "verdicts")?,
            limiter: InFlightLimiter::new(max_in_flight),
        })
    }

    pub fn with_join(mut self, join: &str) -> Self {
        self.join = join.to_owned();
        self
    }

    pub fn model_version(&self) -> &str {
        &self.model_version
    }

    /// Builds a question-prefixed pair using this gateway's join string.
    pub fn input(&self, question: &str, reference: &str, candidate: &str) -> Result<NliInput, NliError> {
        build_nli_input_with(&self.join, question, reference, candidate)
    }

    fn key(&self, input: &NliInput) -> NliCacheKey {
        NliCacheKey {
            model_version: self.model_version.clone(),
            pair_fingerprint: input.cache_fingerprint(),
        }
    }

    pub fn score(&self, input: &NliInput) -> Result<NliVerdict, NliError> {
        Ok(self.score_batch(std::slice::from_ref(input))?.remove(0))
    }

    /// Order-preserving; only uncached, distinct pairs reach the scorer.
    pub fn score_batch(&self, inputs: &[NliInput]) -> Result<Vec<NliVerdict>, NliError> {
        let keys: Vec<_> = inputs.iter().map(|i| self.key(i)).collect();
        let mut out: Vec<Option<NliVerdict>> = keys.iter().map(|k| self.cache.get(k)).collect();
        let mut todo: Vec<NliInput> = Vec::new();
        let mut seen = HashSet::new();
        for (i, input) in inputs.iter().enumerate() {
            if out[i].is_none() && seen.insert(&keys[i]) {
                todo.push(input.clone());
            }
        }
        if !todo.is_empty() {
            let verdicts = {
                let _permit = self.limiter.acquire();
                self.scorer.score_pairs(&todo)?
            };
            if verdicts.len() != todo.len() {
                return Err(NliError::MalformedScorerReply(format!(
                    "sent {} pairs, got {} verdicts",
                    todo.len(),
                    verdicts.len()
                )));
            }
            let mut fresh = HashMap::new();
            for (input, v) in todo.iter().zip(verdicts) {
                if !v.is_finite() {
                    return Err(NliError::MalformedScorerReply("non-finite logit".into()));
                }
                let key = self.key(input);
                self.cache.insert(key.clone(), v)?;
                fresh.insert(key, v);
            }
            for (slot, key) in out.iter_mut().zip(&keys) {
                if slot.is_none() {
                    *slot = fresh.get(key).copied();
                }
            }
        }
        Ok(out.into_iter().map(|v| v.expect("every pair scored")).collect())
    }

    pub fn flush(&self) -> Result<(), NliError> {
        Ok(self.cache.flush()?)
    }
}
