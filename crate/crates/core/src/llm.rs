//! Completion backends and the caching gateway in front of them.
//!
//! Two backends ship: an HTTP client for OpenAI-compatible `/completions`
//! endpoints and a table-driven mock. The [`LlmGateway`] caches every
//! generation under a [`CacheKey`] so reruns are served without touching the
//! backend.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cache::{CacheError, SegmentCache};
use crate::concurrency::InFlightLimiter;
use crate::model::{DecodingParams, FinishReason, Generation};
use crate::prompting::PromptRendering;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend unreachable after {attempts} attempt(s): {message}")]
    BackendUnreachable { attempts: u32, message: String },
    #[error("backend omitted token logprobs for prompt {prompt_fingerprint}")]
    MissingLogprobs { prompt_fingerprint: String },
    #[error("backend request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("cannot draw {n} samples at temperature {temperature}")]
    InvalidSampling { n: u32, temperature: f64 },
    #[error("malformed backend reply: {0}")]
    MalformedReply(String),
    #[error("no mock rule matches prompt {0:?}")]
    NoMockRule(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// Hex SHA-256 of a string.
pub fn fingerprint(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Fingerprint of the decoding settings that change what a backend returns.
/// `n_samples` is excluded: each sample has its own index in the key, so a
/// run with n=8 reuses the first eight samples of a run with n=10.
pub fn params_fingerprint(params: &DecodingParams) -> String {
    fingerprint(&format!(
        "temperature={:?};max_tokens={};seed={:?}",
        params.temperature, params.max_tokens, params.seed
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub backend_id: String,
    pub prompt_fingerprint: String,
    pub params_fingerprint: String,
    pub sample_index: u32,
}

impl CacheKey {
    pub fn new(backend_id: &str, prompt: &str, params: &DecodingParams, sample_index: u32) -> Self {
        Self {
            backend_id: backend_id.to_owned(),
            prompt_fingerprint: fingerprint(prompt),
            params_fingerprint: params_fingerprint(params),
            sample_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpCompletion,
    ScriptedMock,
}

fn default_auth_env() -> String {
    "OPENAI_API_KEY".to_owned()
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    pub model_name: String,
    #[serde(default = "default_auth_env")]
    pub auth_env_var: String,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retry_limit: u32,
    /// Script file for [`BackendKind::ScriptedMock`].
    #[serde(default)]
    pub mock_path: Option<PathBuf>,
}

impl BackendConfig {
    pub fn mock(model_name: &str, mock_path: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::ScriptedMock,
            endpoint_url: None,
            model_name: model_name.to_owned(),
            auth_env_var: default_auth_env(),
            max_in_flight: default_in_flight(),
            timeout_ms: default_timeout(),
            retry_limit: default_retries(),
            mock_path: Some(mock_path.into()),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_in_flight == 0 {
            return Err(GatewayError::Config("max_in_flight must be at least 1".into()));
        }
        if self.timeout_ms == 0 {
            return Err(GatewayError::Config("timeout_ms must be positive".into()));
        }
        match self.kind {
            BackendKind::HttpCompletion if self.endpoint_url.is_none() => {
                Err(GatewayError::Config("HttpCompletion requires endpoint_url".into()))
            }
            BackendKind::ScriptedMock if self.mock_path.is_none() => {
                Err(GatewayError::Config("ScriptedMock requires mock_path".into()))
            }
            _ => Ok(()),
        }
    }

    /// Instantiates the configured backend.
    pub fn build(&self) -> Result<Arc<dyn CompletionBackend>, GatewayError> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::HttpCompletion => Arc::new(HttpCompletionBackend::new(self)?),
            BackendKind::ScriptedMock => {
                let path = self.mock_path.as_deref().expect("validated");
                Arc::new(ScriptedMock::from_file(path)?)
            }
        })
    }
}

/// A completion before it is bound to a prompt fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub token_logprobs: Option<Vec<f64>>,
    pub finish_reason: FinishReason,
}

pub trait CompletionBackend: Send + Sync {
    /// Identifies the backend and model in cache keys.
    fn backend_id(&self) -> String;

    /// Produces one completion per requested sample index, in order.
    fn generate(
        &self,
        prompt: &str,
        params: &DecodingParams,
        sample_indices: &[u32],
    ) -> Result<Vec<Completion>, GatewayError>;
}

// ---------------------------------------------------------------------------
// HTTP backend

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    max_tokens: u32,
    logprobs: u32,
    n: u32,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    index: Option<u32>,
    text: String,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    token_logprobs: Option<Vec<Option<f64>>>,
}

pub struct HttpCompletionBackend {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    token: Option<String>,
    retry_limit: u32,
}

impl HttpCompletionBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, GatewayError> {
        let endpoint = config
            .endpoint_url
            .as_deref()
            .ok_or_else(|| GatewayError::Config("HttpCompletion requires endpoint_url".into()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        let token = std::env::var(&config.auth_env_var).ok();
        if token.is_none() {
            log::warn!("{} is not set; sending completion requests without a bearer token", config.auth_env_var);
        }
        Ok(Self {
            client,
            url: format!("{}/completions", endpoint.trim_end_matches('/')),
            model: config.model_name.clone(),
            token,
            retry_limit: config.retry_limit,
        })
    }

    fn parse_choice(choice: Choice) -> Result<Completion, GatewayError> {
        let token_logprobs = match choice.logprobs.and_then(|l| l.token_logprobs) {
            Some(lps) => lps
                .into_iter()
                .map(|lp| match lp {
                    Some(v) if v.is_finite() => Ok(Some(v.min(0.0))),
                    Some(v) => Err(GatewayError::MalformedReply(format!("non-finite logprob {v}"))),
                    None => Ok(None),
                })
                .collect::<Result<Option<Vec<f64>>, _>>()?,
            None => None,
        };
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("stop") => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            _ => FinishReason::Other,
        };
        Ok(Completion {
            text: choice.text,
            token_logprobs,
            finish_reason,
        })
    }
}

impl CompletionBackend for HttpCompletionBackend {
    fn backend_id(&self) -> String {
        format!("http:{}@{}", self.model, self.url)
    }

    fn generate(
        &self,
        prompt: &str,
        params: &DecodingParams,
        sample_indices: &[u32],
    ) -> Result<Vec<Completion>, GatewayError> {
        let n = sample_indices.len() as u32;
        let body = CompletionRequest {
            model: &self.model,
            prompt,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            logprobs: 1,
            n,
        };
        let attempts = self.retry_limit + 1;
        let mut last = GatewayError::BackendUnreachable {
            attempts: 0,
            message: "no attempt made".into(),
        };
        for attempt in 1..=attempts {
            if attempt > 1 {
                std::thread::sleep(Duration::from_millis(100 * (1 << (attempt - 2).min(6))));
            }
            let mut req = self.client.post(&self.url).json(&body);
            if let Some(token) = &self.token {
                req = req.bearer_auth(token);
            }
            let resp = match req.send() {
                Ok(r) => r,
                Err(e) if e.is_timeout() => {
                    last = GatewayError::Timeout { attempts: attempt };
                    continue;
                }
                Err(e) => {
                    last = GatewayError::BackendUnreachable {
                        attempts: attempt,
                        message: e.to_string(),
                    };
                    continue;
                }
            };
            let status = resp.status();
            if status.is_server_error() || status.as_u16() == 429 {
                last = GatewayError::BackendUnreachable {
                    attempts: attempt,
                    message: format!("HTTP {status}"),
                };
                continue;
            }
            if !status.is_success() {
                let text = resp.text().unwrap_or_default();
                return Err(GatewayError::MalformedReply(format!("HTTP {status}: {text}")));
            }
            let parsed: CompletionResponse = match resp.json() {
                Ok(p) => p,
                Err(e) if e.is_timeout() => {
                    last = GatewayError::Timeout { attempts: attempt };
                    continue;
                }
                Err(e) => return Err(GatewayError::MalformedReply(e.to_string())),
            };
            let mut choices = parsed.choices;
            if choices.len() != n as usize {
                return Err(GatewayError::MalformedReply(format!(
                    "requested {n} choices, got {}",
                    choices.len()
                )));
            }
            choices.sort_by_key(|c| c.index.unwrap_or(0));
            return choices.into_iter().map(Self::parse_choice).collect();
        }
        Err(last)
    }
}

// ---------------------------------------------------------------------------
// Scripted mock

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSample {
    pub text: String,
    #[serde(default)]
    pub token_logprobs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    /// Substring of the rendered prompt. The longest matching rule wins.
    pub contains: String,
    pub text: String,
    #[serde(default)]
    pub token_logprobs: Option<Vec<f64>>,
    /// Variants returned cyclically for sampled (temperature > 0) requests.
    #[serde(default)]
    pub samples: Vec<MockSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default = "default_mock_id")]
    pub backend_id: String,
    #[serde(default)]
    pub latency_ms: u64,
    pub rules: Vec<MockRule>,
}

fn default_mock_id() -> String {
    "mock".to_owned()
}

/// Table-driven offline backend with request counters.
pub struct ScriptedMock {
    script: MockScript,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl ScriptedMock {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("reading mock script {}: {e}", path.display())))?;
        let script = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Config(format!("parsing mock script {}: {e}", path.display())))?;
        Ok(Self::new(script))
    }

    /// Number of `generate` calls served.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    fn find_rule(&self, prompt: &str) -> Option<&MockRule> {
        let mut best: Option<&MockRule> = None;
        for rule in &self.script.rules {
            if prompt.contains(&rule.contains) && best.is_none_or(|b| rule.contains.len() > b.contains.len()) {
                best = Some(rule);
            }
        }
        best
    }
}

impl CompletionBackend for ScriptedMock {
    fn backend_id(&self) -> String {
        format!("mock:{}", self.script.backend_id)
    }

    fn generate(
        &self,
        prompt: &str,
        params: &DecodingParams,
        sample_indices: &[u32],
    ) -> Result<Vec<Completion>, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        if self.script.latency_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.script.latency_ms));
        }
        let result = self
            .find_rule(prompt)
            .ok_or_else(|| GatewayError::NoMockRule(prompt.to_owned()))
            .map(|rule| {
                let offset = params.seed.unwrap_or(0) as usize;
                sample_indices
                    .iter()
                    .map(|&i| {
                        let (text, lps) = if params.is_greedy() || rule.samples.is_empty() {
                            (&rule.text, &rule.token_logprobs)
                        } else {
                            let s = &rule.samples[(i as usize + offset) % rule.samples.len()];
                            (&s.text, &s.token_logprobs)
                        };
                        Completion {
                            text: text.clone(),
                            token_logprobs: lps.clone(),
                            finish_reason: FinishReason::Stop,
                        }
                    })
                    .collect()
            });
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

// ---------------------------------------------------------------------------
// Gateway

/// Caching front for a completion backend.
pub struct LlmGateway {
    backend: Arc<dyn CompletionBackend>,
    backend_id: String,
    cache: SegmentCache<CacheKey, Generation>,
    limiter: InFlightLimiter,
}

impl LlmGateway {
    pub fn open(backend: Arc<dyn CompletionBackend>, cache_dir: &Path, max_in_flight: usize) -> Result<Self, GatewayError> {
        let backend_id = backend.backend_id();
        Ok(Self {
            backend,
            backend_id,
            cache: SegmentCache::open(cache_dir.join("llm"), "generations")?,
            limiter: InFlightLimiter::new(max_in_flight),
        })
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn max_in_flight(&self) -> usize {
        self.limiter.limit()
    }

    fn key(&self, prompt: &str, params: &DecodingParams, index: u32) -> CacheKey {
        CacheKey::new(&self.backend_id, prompt, params, index)
    }

    /// Single completion (sample index 0). Token logprobs are required.
    pub fn complete(&self, prompt: &PromptRendering, params: &DecodingParams) -> Result<Generation, GatewayError> {
        let key = self.key(&prompt.text, params, 0);
        if let Some(g) = self.cache.get(&key) {
            return Ok(g);
        }
        let completion = {
            let _permit = self.limiter.acquire();
            self.backend.generate(&prompt.text, params, &[0])?
        }
        .into_iter()
        .next()
        .ok_or_else(|| GatewayError::MalformedReply("empty completion list".into()))?;
        if completion.token_logprobs.is_none() {
            return Err(GatewayError::MissingLogprobs {
                prompt_fingerprint: key.prompt_fingerprint,
            });
        }
        let generation = bind(completion, &key.prompt_fingerprint);
        self.cache.insert(key, generation.clone())?;
        Ok(generation)
    }

    /// `n` sampled completions, cached per sample index. Logprobs are kept
    /// when the backend reports them but not required.
    pub fn sample_n(&self, prompt: &PromptRendering, params: &DecodingParams, n: u32) -> Result<Vec<Generation>, GatewayError> {
        if n == 0 || (n > 1 && params.is_greedy()) {
            return Err(GatewayError::InvalidSampling {
                n,
                temperature: params.temperature,
            });
        }
        let mut out: Vec<Option<Generation>> = (0..n).map(|i| self.cache.get(&self.key(&prompt.text, params, i))).collect();
        let missing: Vec<u32> = (0..n).filter(|&i| out[i as usize].is_none()).collect();
        if !missing.is_empty() {
            let completions = {
                let _permit = self.limiter.acquire();
                self.backend.generate(&prompt.text, params, &missing)?
            };
            if completions.len() != missing.len() {
                return Err(GatewayError::MalformedReply(format!(
                    "requested {} samples, got {}",
                    missing.len(),
                    completions.len()
                )));
            }
            for (idx, completion) in missing.into_iter().zip(completions) {
                let key = self.key(&prompt.text, params, idx);
                let generation = bind(completion, &key.prompt_fingerprint);
                self.cache.insert(key, generation.clone())?;
                out[idx as usize] = Some(generation);
            }
        }
        Ok(out.into_iter().map(|g| g.expect("filled above")).collect())
    }

    /// Cache-only lookup of a single completion.
    pub fn cached(&self, prompt: &str, params: &DecodingParams, index: u32) -> Option<Generation> {
        self.cache.get(&self.key(prompt, params, index))
    }

    /// Cache-only lookup of `n` samples; `None` unless all are present.
    pub fn cached_samples(&self, prompt: &str, params: &DecodingParams, n: u32) -> Option<Vec<Generation>> {
        (0..n).map(|i| self.cached(prompt, params, i)).collect()
    }

    pub fn flush(&self) -> Result<(), GatewayError> {
        Ok(self.cache.flush()?)
    }
}

fn bind(c: Completion, prompt_fingerprint: &str) -> Generation {
    Generation {
        text: c.text,
        token_logprobs: c.token_logprobs,
        finish_reason: c.finish_reason,
        prompt_fingerprint: prompt_fingerprint.to_owned(),
    }
}
