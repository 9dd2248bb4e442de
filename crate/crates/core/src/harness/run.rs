use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{info, warn};

use super::config::{ConfigError, EmbeddingConfig, ExperimentConfig, ModelConfig};
use super::dataset::{dataset_name, load_dataset, DatasetError, DatasetItem};
use super::report::{build_run_report, write_reports, RunReport};
use crate::aggregation::{majority_vote_mcq, majority_vote_open, AggregationError};
use crate::corpus::{CorpusError, SnippetStore};
use crate::embedding::{Embedder, HashEmbedder, RemoteEmbedder};
use crate::generation::{generate, ChatModel, ItemMeta, MockModel, ParsedAnswer, RemoteChatModel};
use crate::http::HttpError;
use crate::metrics::{binarize_open_answer, rouge_l, PredictionRecord};
use crate::prompts::{
    check_counterfactual_consistency, counterfactual_alternates, FilterStrategy, PromptBuilder, PromptError, TemplateSet,
};
use crate::retrieval::{Bm25Index, RetrievalEngine, RetrievalError, RetrieverKind, BM25_VERSION};
use crate::variants::{generate_variants, variant_key, Assignment, Insertion, Neutralizer, VariantError};

pub const CONFIG_FILE: &str = "config.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const AUDIT_FILE: &str = "audit.jsonl";
pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const ERRORS_FILE: &str = "errors.jsonl";
/// Environment variable naming a directory for cached BM25 indexes.
pub const CACHE_ENV: &str = "EQUIRAG_CACHE";
/// Variant key of a post-vote record.
pub const MAJORITY_VOTE_KEY: &str = "majority_vote";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Template(#[from] PromptError),
    #[error(transparent)]
    Variants(#[from] VariantError),
    #[error("model endpoint: {0}")]
    Model(#[from] HttpError),
    #[error("io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{failed} of {total} items failed, over the failure budget; partial outputs in {run_dir}")]
    FailureBudgetExceeded { failed: usize, total: usize, run_dir: PathBuf },
    #[error("{0}")]
    Invalid(String),
}

impl RunError {
    /// 2 for configuration problems, 3 for an exceeded failure budget, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Dataset(_) | RunError::Template(_) | RunError::Variants(_) | RunError::Invalid(_) => 2,
            RunError::Model(HttpError::AuthFailure(_) | HttpError::InvalidEndpoint(_)) => 2,
            RunError::FailureBudgetExceeded { .. } => 3,
            _ => 1,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One model call, for the transcript log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub item_id: String,
    pub variant_key: String,
    /// Assignment the prompt was realized with (differs from `variant_key`
    /// for counterfactual probes).
    pub probe_key: String,
    pub model: String,
    pub prompt: String,
    pub raw_text: String,
    pub parsed: ParsedAnswer,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

/// Per item × variant trace, written whether or not votes are aggregated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub item_id: String,
    pub variant_key: String,
    pub group: Assignment,
    pub insertion: Insertion,
    pub query: String,
    pub retriever_id: String,
    pub retrieved: Vec<String>,
    pub answer: ParsedAnswer,
    pub y_hat: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probes: Vec<(String, ParsedAnswer)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterfactual_consistent: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemError {
    pub item_id: String,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Default)]
struct ItemOutcome {
    records: Vec<PredictionRecord>,
    audit: Vec<AuditEntry>,
    transcripts: Vec<Transcript>,
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub report: RunReport,
    pub failed_items: usize,
}

/// Everything a run needs, loaded once and shared read-only by the workers.
pub struct Pipeline {
    config: ExperimentConfig,
    items: Vec<DatasetItem>,
    dataset: String,
    store: SnippetStore,
    engine: RetrievalEngine<f64>,
    builder: PromptBuilder,
    model: Box<dyn ChatModel>,
    vote_embedder: Option<Arc<dyn Embedder<f64>>>,
    fingerprint: String,
}

/// Hex sha256 over the config, every template file and the seed.
/// `output_dir` and `parallelism` only say where and how fast a run happens,
/// so they are left out.
pub fn config_fingerprint(config: &ExperimentConfig, templates: &TemplateSet) -> String {
    let mut identity = config.clone();
    identity.output_dir = PathBuf::new();
    identity.parallelism = 1;
    let mut h = Sha256::new();
    h.update(serde_json::to_string(&identity).expect("config serializes").as_bytes());
    h.update([0]);
    h.update(templates.version.as_bytes());
    for s in FilterStrategy::ALL {
        h.update([0]);
        h.update(templates.get(s).as_bytes());
    }
    h.update(config.seed.to_le_bytes());
    hex::encode(h.finalize())
}

fn load_or_build_bm25(config: &ExperimentConfig, store: &SnippetStore) -> Result<Option<Bm25Index<f64>>, RunError> {
    if !config.retrieval.retrievers.contains(&RetrieverKind::Bm25) {
        return Ok(None);
    }
    let wanted = (config.retrieval.bm25_k1, config.retrieval.bm25_b);
    if let Some(path) = &config.index {
        let idx = Bm25Index::<f64>::load(path)?;
        if idx.params() != wanted || idx.num_docs() != store.len() {
            return Err(RunError::Invalid(format!(
                "index {} does not match the store or the configured k1/b",
                path.display()
            )));
        }
        return Ok(Some(idx));
    }
    let Some(cache) = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) else {
        return Ok(None);
    };
    let mut h = Sha256::new();
    h.update(serde_json::to_string(store.manifest()).expect("manifest serializes").as_bytes());
    for s in store.snippets() {
        h.update(s.id.as_bytes());
        h.update([0]);
        h.update(s.text.as_bytes());
        h.update([0]);
    }
    h.update(format!("{BM25_VERSION}:{}:{}", wanted.0, wanted.1).as_bytes());
    let path = PathBuf::from(cache).join(format!("bm25-{}.json", &hex::encode(h.finalize())[..16]));
    if path.exists() {
        match Bm25Index::<f64>::load(&path) {
            Ok(idx) => {
                info!(path = %path.display(), "using cached BM25 index");
                return Ok(Some(idx));
            }
            Err(e) => warn!(path = %path.display(), error = %e, "ignoring unreadable cached index"),
        }
    }
    let idx = Bm25Index::build(store, wanted.0, wanted.1)?;
    if let Err(e) = idx.save(&path) {
        warn!(path = %path.display(), error = %e, "could not write index cache");
    }
    Ok(Some(idx))
}

impl Pipeline {
    pub fn prepare(config: ExperimentConfig) -> Result<Self, RunError> {
        config.validate()?;
        let mut items = load_dataset(&config.dataset)?;
        if let Some(max) = config.max_items {
            items.truncate(max);
        }
        let store = SnippetStore::load(&config.store)?;
        let templates = match &config.templates_dir {
            Some(dir) => TemplateSet::load_dir(dir)?,
            None => TemplateSet::default(),
        };
        let fingerprint = config_fingerprint(&config, &templates);
        let embedder: Arc<dyn Embedder<f64>> = match &config.embedding {
            EmbeddingConfig::Hash { dim } => Arc::new(HashEmbedder::new(*dim)),
            EmbeddingConfig::Remote(ep) => Arc::new(RemoteEmbedder::new(ep.clone()).map_err(|e| RunError::Invalid(e.to_string()))?),
        };
        let vote_embedder = matches!(config.embedding, EmbeddingConfig::Remote(_)).then(|| embedder.clone());
        let bm25 = load_or_build_bm25(&config, &store)?;
        let engine = RetrievalEngine::build(config.retrieval.clone(), &store, bm25, Some(embedder))?;
        let model: Box<dyn ChatModel> = match &config.model {
            ModelConfig::Mock(_) => Box::new(MockModel::new(config.mock_spec().expect("mock model"))),
            ModelConfig::Remote(ep) => Box::new(RemoteChatModel::new(ep.clone())?),
        };
        let builder = PromptBuilder::new(templates, Neutralizer::from_config(&config.demographics));
        Ok(Pipeline {
            dataset: dataset_name(&config.dataset),
            config,
            items,
            store,
            engine,
            builder,
            model,
            vote_embedder,
            fingerprint,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    fn score(&self, item: &DatasetItem, answer: &ParsedAnswer) -> (u8, Option<f64>) {
        match item.gold_letter() {
            Some(gold) => (u8::from(answer.letter() == Some(gold)), None),
            None => {
                let r: f64 = rouge_l(answer.text().unwrap_or(""), &item.gold);
                (binarize_open_answer(r, self.config.tau_r), Some(r))
            }
        }
    }

    fn call(
        &self,
        item: &DatasetItem,
        variant_key: &str,
        group: &Assignment,
        prompt: &str,
        transcripts: &mut Vec<Transcript>,
        parent_key: &str,
    ) -> Result<ParsedAnswer, HttpError> {
        let meta = ItemMeta {
            item_id: item.id.clone(),
            variant_key: variant_key.to_string(),
            group: group.clone(),
            options: item.options.clone(),
            gold: item.gold.clone(),
        };
        let r = generate(self.model.as_ref(), prompt, &meta)?;
        transcripts.push(Transcript {
            item_id: item.id.clone(),
            variant_key: parent_key.to_string(),
            probe_key: variant_key.to_string(),
            model: self.model.id(),
            prompt: prompt.to_string(),
            raw_text: r.raw_text,
            parsed: r.parsed.clone(),
            latency_ms: r.latency_ms,
            attempt_count: r.attempt_count,
        });
        Ok(r.parsed)
    }

    /// Combine counterfactual probe answers into the variant's answer.
    fn resolve_probes(&self, item: &DatasetItem, answers: &[ParsedAnswer]) -> (ParsedAnswer, bool) {
        if item.is_closed() {
            return match check_counterfactual_consistency(answers) {
                Ok((letter, consistent)) => (ParsedAnswer::Letter(letter), consistent),
                Err(_) => (ParsedAnswer::Unparseable, false),
            };
        }
        let texts: Vec<&str> = answers.iter().filter_map(ParsedAnswer::text).collect();
        match majority_vote_open(&texts, self.vote_embedder.as_deref(), self.config.tau_c) {
            Ok(v) => (
                ParsedAnswer::FreeText(v.final_text),
                texts.len() == answers.len() && v.clusters.len() == 1,
            ),
            Err(_) => (ParsedAnswer::Unparseable, false),
        }
    }

    fn run_item(&self, item: &DatasetItem) -> Result<ItemOutcome, ItemError> {
        let fail = |stage: &str, message: String| ItemError {
            item_id: item.id.clone(),
            stage: stage.to_string(),
            message,
        };
        let variants =
            generate_variants(&item.id, &item.question, &self.config.demographics).map_err(|e| fail("variants", e.to_string()))?;
        let mut out = ItemOutcome::default();
        let counterfactual = self.config.strategy == FilterStrategy::Counterfactual;

        for v in &variants {
            let query_key = format!("{}#{}", item.id, v.variant_key);
            let evidence = self
                .engine
                .retrieve(&query_key, &v.realized_text)
                .map_err(|e| fail("retrieval", e.to_string()))?;
            let alternates = if counterfactual {
                counterfactual_alternates(&v.assignment, &self.config.demographics)
            } else {
                Vec::new()
            };
            let bundle = self
                .builder
                .build(self.config.strategy, v, &evidence, &self.store, item.options.as_ref(), &alternates)
                .map_err(|e| fail("prompt", e.to_string()))?;

            let probes = bundle.probe_assignments.clone().unwrap_or_else(|| vec![v.assignment.clone()]);
            let mut answers = Vec::with_capacity(bundle.prompts.len());
            for (prompt, probe) in bundle.prompts.iter().zip(&probes) {
                let key = variant_key(probe);
                let answer = self
                    .call(item, &key, probe, prompt, &mut out.transcripts, &v.variant_key)
                    .map_err(|e| fail("generation", e.to_string()))?;
                answers.push((key, answer));
            }
            let (answer, consistent) = if counterfactual {
                let parsed: Vec<ParsedAnswer> = answers.iter().map(|(_, a)| a.clone()).collect();
                let (a, c) = self.resolve_probes(item, &parsed);
                (a, Some(c))
            } else {
                (answers[0].1.clone(), None)
            };
            let (y_hat, rouge) = self.score(item, &answer);
            out.audit.push(AuditEntry {
                item_id: item.id.clone(),
                variant_key: v.variant_key.clone(),
                group: v.assignment.clone(),
                insertion: v.insertion,
                query: v.realized_text.clone(),
                retriever_id: evidence.retriever_id.clone(),
                retrieved: evidence.ids().map(str::to_owned).collect(),
                answer,
                y_hat,
                rouge_l: rouge,
                probes: if counterfactual { answers } else { Vec::new() },
                counterfactual_consistent: consistent,
            });
        }

        out.records = if self.config.majority_vote {
            vec![self.vote(item, &out.audit)?]
        } else {
            out.audit
                .iter()
                .map(|a| PredictionRecord {
                    item_id: item.id.clone(),
                    variant_key: a.variant_key.clone(),
                    group: a.group.clone(),
                    vote_groups: Vec::new(),
                    y_hat: a.y_hat,
                    answerable: item.answerable,
                    strategy: self.config.strategy,
                    dataset: self.dataset.clone(),
                    answer: answer_string(&a.answer),
                    rouge_l: a.rouge_l,
                    tie: None,
                    counterfactual_consistent: a.counterfactual_consistent,
                })
                .collect()
        };
        Ok(out)
    }

    /// One record per item: the consensus answer stands in for every variant.
    fn vote(&self, item: &DatasetItem, audit: &[AuditEntry]) -> Result<PredictionRecord, ItemError> {
        let (answer, tie) = if item.is_closed() {
            let answers: BTreeMap<String, ParsedAnswer> = audit.iter().map(|a| (a.variant_key.clone(), a.answer.clone())).collect();
            match majority_vote_mcq(&answers) {
                Ok(v) => (ParsedAnswer::Letter(v.final_answer), Some(v.tie)),
                Err(AggregationError::NoParseableAnswers) => (ParsedAnswer::Unparseable, None),
                Err(e) => return Err(self.item_error(item, "aggregation", e.to_string())),
            }
        } else {
            let texts: Vec<&str> = audit.iter().filter_map(|a| a.answer.text()).collect();
            if texts.is_empty() {
                (ParsedAnswer::Unparseable, None)
            } else {
                let v = majority_vote_open(&texts, self.vote_embedder.as_deref(), self.config.tau_c)
                    .map_err(|e| self.item_error(item, "aggregation", e.to_string()))?;
                (ParsedAnswer::FreeText(v.final_text), Some(v.tie))
            }
        };
        let (y_hat, rouge) = self.score(item, &answer);
        let consistent = (self.config.strategy == FilterStrategy::Counterfactual)
            .then(|| audit.iter().all(|a| a.counterfactual_consistent == Some(true)));
        Ok(PredictionRecord {
            item_id: item.id.clone(),
            variant_key: MAJORITY_VOTE_KEY.to_string(),
            group: Assignment::new(),
            vote_groups: audit.iter().map(|a| a.group.clone()).collect(),
            y_hat,
            answerable: item.answerable,
            strategy: self.config.strategy,
            dataset: self.dataset.clone(),
            answer: answer_string(&answer),
            rouge_l: rouge,
            tie,
            counterfactual_consistent: consistent,
        })
    }

    fn item_error(&self, item: &DatasetItem, stage: &str, message: String) -> ItemError {
        ItemError {
            item_id: item.id.clone(),
            stage: stage.to_string(),
            message,
        }
    }

    /// Run every item on a pool of `parallelism` workers, then write the run
    /// directory under `output_dir`.
    pub fn run(&self) -> Result<RunSummary, RunError> {
        let started = Instant::now();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.parallelism)
            .build()
            .map_err(|e| RunError::Invalid(e.to_string()))?;
        let outcomes: Vec<Result<ItemOutcome, ItemError>> = pool.install(|| self.items.par_iter().map(|it| self.run_item(it)).collect());

        let mut records = Vec::new();
        let mut audit = Vec::new();
        let mut transcripts = Vec::new();
        let mut errors = Vec::new();
        for o in outcomes {
            match o {
                Ok(o) => {
                    records.extend(o.records);
                    audit.extend(o.audit);
                    transcripts.extend(o.transcripts);
                }
                Err(e) => {
                    warn!(item = %e.item_id, stage = %e.stage, "item failed: {}", e.message);
                    errors.push(e);
                }
            }
        }

        let run_dir = create_run_dir(&self.config.output_dir, &self.fingerprint)?;
        write_file(&run_dir.join(CONFIG_FILE), &self.config.to_json())?;
        write_jsonl(&run_dir.join(RECORDS_FILE), &records)?;
        write_jsonl(&run_dir.join(AUDIT_FILE), &audit)?;
        write_jsonl(&run_dir.join(TRANSCRIPTS_FILE), &transcripts)?;
        write_jsonl(&run_dir.join(ERRORS_FILE), &errors)?;

        let total = self.items.len();
        let failed = errors.len();
        info!(items = total, failed, elapsed = ?started.elapsed(), run_dir = %run_dir.display(), "run finished");
        if failed as f64 > self.config.failure_budget * total as f64 {
            return Err(RunError::FailureBudgetExceeded { failed, total, run_dir });
        }
        let report = build_run_report(&self.config, &self.fingerprint, total, failed, &records, &audit)?;
        write_reports(&run_dir, &report)?;
        Ok(RunSummary {
            run_dir,
            report,
            failed_items: failed,
        })
    }
}

fn answer_string(a: &ParsedAnswer) -> Option<String> {
    match a {
        ParsedAnswer::Letter(c) => Some(c.to_string()),
        ParsedAnswer::FreeText(t) => Some(t.clone()),
        ParsedAnswer::Unparseable => None,
    }
}

/// Load, run and write one experiment.
pub fn run_experiment(config: ExperimentConfig) -> Result<RunSummary, RunError> {
    Pipeline::prepare(config)?.run()
}

fn create_run_dir(output_dir: &Path, fingerprint: &str) -> Result<PathBuf, RunError> {
    fs::create_dir_all(output_dir).map_err(io_err(output_dir))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ");
    let short = &fingerprint[..12.min(fingerprint.len())];
    for n in 0.. {
        let name = if n == 0 {
            format!("{stamp}-{short}")
        } else {
            format!("{stamp}-{short}-{n}")
        };
        let dir = output_dir.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir)(e)),
        }
    }
    unreachable!("unbounded loop returns")
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), RunError> {
    fs::write(path, contents).map_err(io_err(path))
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), RunError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| io_err(path)(e.into()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| RunError::Invalid(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Groups each grouping can take under `config`, for reporting groups that
/// never appear.
pub fn known_groups(config: &ExperimentConfig) -> BTreeMap<crate::metrics::Grouping, BTreeSet<String>> {
    use crate::metrics::Grouping;
    use crate::variants::Axis;
    let d = &config.demographics;
    let axis_values = |axis: Axis| -> BTreeSet<String> {
        if d.axes.contains(&axis) {
            d.values(axis).iter().cloned().collect()
        } else {
            BTreeSet::new()
        }
    };
    let combined = d.assignments().map(|a| a.iter().map(variant_key).collect()).unwrap_or_default();
    BTreeMap::from([
        (Grouping::Race, axis_values(Axis::Race)),
        (Grouping::Gender, axis_values(Axis::Gender)),
        (Grouping::Combined, combined),
    ])
}
