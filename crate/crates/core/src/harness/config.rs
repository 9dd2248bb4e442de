use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::DEFAULT_CLUSTER_THRESHOLD;
use crate::generation::MockModelSpec;
use crate::http::ModelEndpoint;
use crate::metrics::{Grouping, OverlapMode, DEFAULT_ROUGE_THRESHOLD};
use crate::prompts::FilterStrategy;
use crate::retrieval::RetrievalConfig;
use crate::variants::DemographicConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn default_base_rate() -> f64 {
    0.7
}

/// Mock model rates; the seed comes from the experiment's `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRates {
    #[serde(default = "default_base_rate")]
    pub base_correct_rate: f64,
    #[serde(default)]
    pub per_group_correct_rate: BTreeMap<String, f64>,
}

impl Default for MockRates {
    fn default() -> Self {
        MockRates {
            base_correct_rate: default_base_rate(),
            per_group_correct_rate: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Mock(MockRates),
    Remote(ModelEndpoint),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Mock(MockRates::default())
    }
}

fn default_dim() -> usize {
    256
}

/// Embedder for dense retrieval and open-ended voting. With `hash`, voting
/// falls back to TF-IDF over the responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbeddingConfig {
    Hash {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Remote(ModelEndpoint),
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig::Hash { dim: default_dim() }
    }
}

fn default_tau_c() -> f64 {
    DEFAULT_CLUSTER_THRESHOLD
}
fn default_tau_r() -> f64 {
    DEFAULT_ROUGE_THRESHOLD
}
fn default_parallelism() -> usize {
    4
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_failure_budget() -> f64 {
    0.10
}
fn default_strategy() -> FilterStrategy {
    FilterStrategy::Plain
}
fn default_grouping() -> Grouping {
    Grouping::Combined
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dataset: PathBuf,
    pub store: PathBuf,
    /// Prebuilt BM25 index; built (or taken from `EQUIRAG_CACHE`) when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<PathBuf>,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub demographics: DemographicConfig,
    #[serde(default = "default_strategy")]
    pub strategy: FilterStrategy,
    #[serde(default)]
    pub majority_vote: bool,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default = "default_tau_c")]
    pub tau_c: f64,
    #[serde(default = "default_tau_r")]
    pub tau_r: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_items: Option<usize>,
    /// Largest tolerated fraction of failed items.
    #[serde(default = "default_failure_budget")]
    pub failure_budget: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    /// Grouping used for the headline DP/EO; all groupings are reported.
    #[serde(default = "default_grouping")]
    pub grouping: Grouping,
    #[serde(default)]
    pub overlap_mode: OverlapMode,
}

impl ExperimentConfig {
    /// Minimal config with every default.
    pub fn new(dataset: impl Into<PathBuf>, store: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            name: None,
            dataset: dataset.into(),
            store: store.into(),
            index: None,
            retrieval: RetrievalConfig::default(),
            demographics: DemographicConfig::default(),
            strategy: default_strategy(),
            majority_vote: false,
            model: ModelConfig::default(),
            embedding: EmbeddingConfig::default(),
            tau_c: default_tau_c(),
            tau_r: default_tau_r(),
            seed: 0,
            parallelism: default_parallelism(),
            output_dir: default_output_dir(),
            max_items: None,
            failure_budget: default_failure_budget(),
            templates_dir: None,
            grouping: default_grouping(),
            overlap_mode: OverlapMode::default(),
        }
    }

    /// Reads TOML (`.toml`) or JSON (anything else); relative paths are
    /// resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let parse_err = |message: String| ConfigError::Parse {
            path: path.display().to_string(),
            message,
        };
        let mut cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.store);
        fix(&mut self.output_dir);
        if let Some(p) = self.index.as_mut() {
            fix(p);
        }
        if let Some(p) = self.templates_dir.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.retrieval.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.majority_vote && self.demographics.axes.is_empty() {
            return bad("majority_vote needs at least one demographic axis".into());
        }
        for axis in &self.demographics.axes {
            if self.demographics.values(*axis).is_empty() {
                return bad(format!("no values configured for axis {axis}"));
            }
        }
        if !(-1.0..=1.0).contains(&self.tau_c) {
            return bad(format!("tau_c {} is outside [-1, 1]", self.tau_c));
        }
        if !(0.0..=1.0).contains(&self.tau_r) {
            return bad(format!("tau_r {} is outside [0, 1]", self.tau_r));
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.failure_budget) {
            return bad(format!("failure_budget {} is outside [0, 1]", self.failure_budget));
        }
        if self.max_items == Some(0) {
            return bad("max_items must be at least 1".into());
        }
        match &self.model {
            ModelConfig::Mock(rates) => self.mock_spec_from(rates).validate().map_err(ConfigError::Invalid)?,
            ModelConfig::Remote(ep) => {
                ep.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
        }
        match &self.embedding {
            EmbeddingConfig::Hash { dim: 0 } => return bad("embedding dim must be positive".into()),
            EmbeddingConfig::Remote(ep) => {
                ep.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
            EmbeddingConfig::Hash { .. } => {}
        }
        if self.strategy == FilterStrategy::Counterfactual && self.demographics.race.len() < 2 && self.demographics.gender.len() < 2 {
            return bad("counterfactual probing needs an axis with at least two values".into());
        }
        Ok(())
    }

    fn mock_spec_from(&self, rates: &MockRates) -> MockModelSpec {
        MockModelSpec {
            seed: self.seed,
            base_correct_rate: rates.base_correct_rate,
            per_group_correct_rate: rates.per_group_correct_rate.clone(),
        }
    }

    /// The mock's spec with the experiment seed, if the model is a mock.
    pub fn mock_spec(&self) -> Option<MockModelSpec> {
        match &self.model {
            ModelConfig::Mock(rates) => Some(self.mock_spec_from(rates)),
            ModelConfig::Remote(_) => None,
        }
    }

    pub fn model_label(&self) -> String {
        match &self.model {
            ModelConfig::Mock(_) => "mock".into(),
            ModelConfig::Remote(ep) => ep.model_name.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
