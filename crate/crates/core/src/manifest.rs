//! Experiment manifests (TOML). Relative paths resolve against the
//! manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusFormat;
use crate::eval::ThresholdNormalization;
use crate::llm::{BackendConfig, BackendKind};
use crate::model::{builtin_expression, DecodingParams, Expression, MetricName};
use crate::nli::{NliBackendConfig, NliBackendKind};
use crate::prompting::PromptTemplates;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("`{field}` points to missing file {path}")]
    MissingFile { field: &'static str, path: PathBuf },
    #[error("unknown expression `{0}`")]
    UnknownExpression(String),
    #[error("invalid manifest: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDecoding {
    #[serde(default = "reference_phase")]
    pub reference: DecodingParams,
    #[serde(default = "reference_phase")]
    pub expression: DecodingParams,
    /// Samples for entropy, semantic entropy and lexical similarity.
    #[serde(default = "sampling_phase")]
    pub sampling: DecodingParams,
    #[serde(default = "selfcheck_phase")]
    pub selfcheck: DecodingParams,
}

fn reference_phase() -> DecodingParams {
    DecodingParams::greedy(64)
}
fn sampling_phase() -> DecodingParams {
    DecodingParams::sampling(1.0, 10, 64)
}
fn selfcheck_phase() -> DecodingParams {
    DecodingParams::sampling(0.5, 8, 64)
}

impl Default for PhaseDecoding {
    fn default() -> Self {
        Self {
            reference: reference_phase(),
            expression: reference_phase(),
            sampling: sampling_phase(),
            selfcheck: selfcheck_phase(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub seed: u64,
    pub size: usize,
}

fn default_expressions() -> Vec<String> {
    vec!["unsure".into(), "mustbe".into()]
}
fn default_certain() -> String {
    "mustbe".into()
}
fn default_uncertain() -> String {
    "unsure".into()
}
fn default_metrics() -> Vec<MetricName> {
    vec![MetricName::FCertain, MetricName::FUncertain, MetricName::FEnsemble]
}
fn default_format() -> CorpusFormat {
    CorpusFormat::Items
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_threshold() -> f64 {
    0.5
}
fn default_normalization() -> ThresholdNormalization {
    ThresholdNormalization::Minmax
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub corpus_path: PathBuf,
    #[serde(default = "default_format")]
    pub corpus_format: CorpusFormat,
    #[serde(default)]
    pub exclusions_path: Option<PathBuf>,
    #[serde(default)]
    pub labels_path: Option<PathBuf>,
    /// Slugs of the expressions to collect.
    #[serde(default = "default_expressions")]
    pub expressions: Vec<String>,
    /// Expressions beyond the built-in four.
    #[serde(default)]
    pub custom_expressions: Vec<Expression>,
    #[serde(default = "default_certain")]
    pub certain_expression: String,
    #[serde(default = "default_uncertain")]
    pub uncertain_expression: String,
    #[serde(default = "default_expressions")]
    pub ensemble: Vec<String>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<MetricName>,
    #[serde(default)]
    pub decoding: PhaseDecoding,
    pub backend: BackendConfig,
    pub nli: NliBackendConfig,
    #[serde(default)]
    pub prompts: PromptTemplates,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub subset: Option<SubsetSpec>,
    #[serde(default)]
    pub abstention_patterns_path: Option<PathBuf>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_normalization")]
    pub threshold_normalization: ThresholdNormalization,
    /// Emit group breakdown tables during eval.
    #[serde(default = "default_true")]
    pub breakdown: bool,
    #[serde(default)]
    pub svg: bool,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentManifest {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ManifestError> {
        let mut m: Self = toml::from_str(text).map_err(|e| ManifestError::Parse {
            path: base_dir.to_owned(),
            message: e.to_string(),
        })?;
        m.resolve_paths(base_dir);
        Ok(m)
    }

    /// Parses, resolves paths and validates.
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_owned(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let m = Self::from_toml_str(&text, base).map_err(|e| match e {
            ManifestError::Parse { message, .. } => ManifestError::Parse {
                path: path.to_owned(),
                message,
            },
            other => other,
        })?;
        m.validate()?;
        Ok(m)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.corpus_path);
        resolve(base, &mut self.output_dir);
        for p in [
            self.exclusions_path.as_mut(),
            self.labels_path.as_mut(),
            self.cache_dir.as_mut(),
            self.abstention_patterns_path.as_mut(),
            self.backend.mock_path.as_mut(),
            self.nli.mock_path.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }

    pub fn expression(&self, id: &str) -> Result<Expression, ManifestError> {
        self.custom_expressions
            .iter()
            .find(|e| e.id == id)
            .cloned()
            .or_else(|| builtin_expression(id))
            .ok_or_else(|| ManifestError::UnknownExpression(id.to_owned()))
    }

    /// The collected expressions, in manifest order.
    pub fn resolved_expressions(&self) -> Result<Vec<Expression>, ManifestError> {
        self.expressions.iter().map(|id| self.expression(id)).collect()
    }

    pub fn wants(&self, metric: MetricName) -> bool {
        self.metrics.contains(&metric)
    }

    pub fn wants_sampling(&self) -> bool {
        self.metrics.iter().any(|m| {
            matches!(
                m,
                MetricName::Entropy | MetricName::SemanticEntropy | MetricName::LexicalSimilarity
            )
        })
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        let must_exist = |field: &'static str, p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(ManifestError::MissingFile {
                    field,
                    path: p.to_owned(),
                })
            }
        };
        must_exist("corpus_path", &self.corpus_path)?;
        if let Some(p) = &self.exclusions_path {
            must_exist("exclusions_path", p)?;
        }
        if let Some(p) = &self.labels_path {
            must_exist("labels_path", p)?;
        }
        if let Some(p) = &self.abstention_patterns_path {
            must_exist("abstention_patterns_path", p)?;
        }
        if self.backend.kind == BackendKind::ScriptedMock {
            if let Some(p) = &self.backend.mock_path {
                must_exist("backend.mock_path", p)?;
            }
        }
        if self.nli.kind == NliBackendKind::Mock {
            if let Some(p) = &self.nli.mock_path {
                must_exist("nli.mock_path", p)?;
            }
        }
        self.backend.validate().map_err(|e| ManifestError::Invalid(e.to_string()))?;
        self.nli.validate().map_err(|e| ManifestError::Invalid(e.to_string()))?;
        self.prompts.validate().map_err(|e| ManifestError::Invalid(e.to_string()))?;

        if self.expressions.is_empty() {
            return Err(ManifestError::Invalid("`expressions` is empty".into()));
        }
        let collected = self.resolved_expressions()?;
        let needs = |id: &str, why: &str| -> Result<(), ManifestError> {
            self.expression(id)?;
            if collected.iter().any(|e| e.id == id) {
                Ok(())
            } else {
                Err(ManifestError::Invalid(format!("{why} expression `{id}` is not in `expressions`")))
            }
        };
        if self.wants(MetricName::FCertain) {
            needs(&self.certain_expression, "certain")?;
        }
        if self.wants(MetricName::FUncertain) {
            needs(&self.uncertain_expression, "uncertain")?;
        }
        if self.wants(MetricName::FEnsemble) {
            if self.ensemble.len() < 2 {
                return Err(ManifestError::Invalid("`ensemble` needs at least two expressions".into()));
            }
            for id in &self.ensemble {
                needs(id, "ensemble")?;
            }
        }

        let d = &self.decoding;
        for (name, p) in [("reference", &d.reference), ("expression", &d.expression)] {
            if !p.is_greedy() || p.n_samples != 1 {
                return Err(ManifestError::Invalid(format!(
                    "decoding.{name} must be greedy with n_samples = 1"
                )));
            }
        }
        for (name, p) in [("sampling", &d.sampling), ("selfcheck", &d.selfcheck)] {
            if p.is_greedy() || p.n_samples < 2 {
                return Err(ManifestError::Invalid(format!(
                    "decoding.{name} needs temperature > 0 and n_samples >= 2"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ManifestError::Invalid("`threshold` must lie in [0, 1]".into()));
        }
        Ok(())
    }
}
