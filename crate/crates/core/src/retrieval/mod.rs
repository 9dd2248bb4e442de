//! Top-k retrieval over a snippet store: lexical BM25, dense cosine, and
//! reciprocal rank fusion of several retrievers.
//!
//! Every ranking in this module breaks score ties by ascending snippet id so
//! that identical inputs always produce identical lists.

mod bm25;
mod dense;
mod fusion;

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bm25::{Bm25Index, Posting, BM25_MAGIC, BM25_VERSION};
pub use dense::DenseIndex;
pub use fusion::fuse_rrf;

use crate::corpus::{CorpusError, SnippetStore};
use crate::embedding::{EmbedError, Embedder};
use crate::scalar::{cmp_desc, Scalar};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("snippet store is empty")]
    EmptyStore,
    #[error("embedding dimension mismatch: index has {expected}, query has {got}")]
    EmbeddingDimMismatch { expected: usize, got: usize },
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("index file is not a BM25 index (bad magic `{0}`)")]
    BadMagic(String),
    #[error("unsupported index version {0}")]
    UnsupportedVersion(u32),
    #[error("retriever {0} requested but not built")]
    RetrieverMissing(RetrieverKind),
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
    #[error("index io: {0}")]
    Io(#[from] std::io::Error),
    #[error("index json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

impl From<EmbedError> for RetrievalError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::DimMismatch { expected, got } => RetrievalError::EmbeddingDimMismatch { expected, got },
            EmbedError::ProviderUnavailable(m) => RetrievalError::ProviderUnavailable(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct RankedEntry<S = f64> {
    pub snippet_id: String,
    pub score: S,
}

/// Ordered retrieval result for one (query, retriever) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct RankedList<S = f64> {
    pub query_key: String,
    pub retriever_id: String,
    pub entries: Vec<RankedEntry<S>>,
}

impl<S: Scalar> RankedList<S> {
    pub fn empty(query_key: impl Into<String>, retriever_id: impl Into<String>) -> Self {
        RankedList {
            query_key: query_key.into(),
            retriever_id: retriever_id.into(),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.snippet_id.as_str())
    }

    /// Checks non-increasing scores, distinct ids and the length bound.
    pub fn check_invariants(&self, k: usize) -> Result<(), String> {
        if self.entries.len() > k {
            return Err(format!("{} entries exceed k={k}", self.entries.len()));
        }
        if let Some(w) = self.entries.windows(2).find(|w| w[1].score > w[0].score) {
            return Err(format!("score increases at {}", w[1].snippet_id));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = self.ids().find(|id| !seen.insert(*id)) {
            return Err(format!("duplicate snippet id {dup}"));
        }
        Ok(())
    }
}

/// Canonical ranking order: score descending, then snippet id ascending.
pub(crate) fn rank_order<S: Scalar>(a: &RankedEntry<S>, b: &RankedEntry<S>) -> Ordering {
    cmp_desc(a.score, b.score).then_with(|| a.snippet_id.cmp(&b.snippet_id))
}

pub(crate) fn top_k<S: Scalar>(mut entries: Vec<RankedEntry<S>>, k: usize) -> Vec<RankedEntry<S>> {
    entries.sort_by(rank_order);
    entries.truncate(k);
    entries
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrieverKind {
    Bm25,
    Dense,
}

impl fmt::Display for RetrieverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrieverKind::Bm25 => "bm25",
            RetrieverKind::Dense => "dense",
        })
    }
}

impl FromStr for RetrieverKind {
    type Err = RetrievalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bm25" => Ok(RetrieverKind::Bm25),
            "dense" | "contriever" => Ok(RetrieverKind::Dense),
            other => Err(RetrievalError::InvalidConfig(format!("unknown retriever `{other}`"))),
        }
    }
}

fn default_k() -> usize {
    15
}
fn default_retrievers() -> BTreeSet<RetrieverKind> {
    BTreeSet::from([RetrieverKind::Bm25])
}
fn default_rrf() -> u32 {
    60
}
fn default_k1() -> f64 {
    1.2
}
fn default_b() -> f64 {
    0.75
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_retrievers")]
    pub retrievers: BTreeSet<RetrieverKind>,
    #[serde(default = "default_rrf")]
    pub rrf_constant: u32,
    #[serde(default = "default_k1")]
    pub bm25_k1: f64,
    #[serde(default = "default_b")]
    pub bm25_b: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: default_k(),
            retrievers: default_retrievers(),
            rrf_constant: default_rrf(),
            bm25_k1: default_k1(),
            bm25_b: default_b(),
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let bad = |m: &str| Err(RetrievalError::InvalidConfig(m.into()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.retrievers.is_empty() {
            return bad("at least one retriever is required");
        }
        if self.rrf_constant == 0 {
            return bad("rrf_constant must be at least 1");
        }
        if self.bm25_k1.is_nan() || self.bm25_k1 <= 0.0 {
            return bad("bm25_k1 must be positive");
        }
        if !(0.0..=1.0).contains(&self.bm25_b) {
            return bad("bm25_b must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn retriever_label(&self) -> String {
        self.retrievers.iter().map(|r| r.to_string()).collect::<Vec<_>>().join("+")
    }
}

/// The configured retrievers bundled for querying. Immutable once built and
/// safe to share across threads.
pub struct RetrievalEngine<S: Scalar = f64> {
    config: RetrievalConfig,
    bm25: Option<Bm25Index<S>>,
    dense: Option<(DenseIndex<S>, Arc<dyn Embedder<S>>)>,
}

impl<S: Scalar> RetrievalEngine<S> {
    /// Builds whatever `config.retrievers` asks for. `bm25` may be a
    /// preloaded index; otherwise one is built from the store.
    pub fn build(
        config: RetrievalConfig,
        store: &SnippetStore,
        bm25: Option<Bm25Index<S>>,
        embedder: Option<Arc<dyn Embedder<S>>>,
    ) -> Result<Self, RetrievalError> {
        config.validate()?;
        let bm25 = if config.retrievers.contains(&RetrieverKind::Bm25) {
            Some(match bm25 {
                Some(idx) => idx,
                None => Bm25Index::build(store, S::from_f64_lossy(config.bm25_k1), S::from_f64_lossy(config.bm25_b))?,
            })
        } else {
            None
        };
        let dense = if config.retrievers.contains(&RetrieverKind::Dense) {
            let embedder = embedder.ok_or(RetrievalError::RetrieverMissing(RetrieverKind::Dense))?;
            Some((DenseIndex::build(embedder.as_ref(), store)?, embedder))
        } else {
            None
        };
        Ok(RetrievalEngine { config, bm25, dense })
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.config
    }

    /// Top-k for `query`, fusing with RRF when more than one retriever is configured.
    pub fn retrieve(&self, query_key: &str, query: &str) -> Result<RankedList<S>, RetrievalError> {
        let k = self.config.k;
        let mut lists = Vec::with_capacity(self.config.retrievers.len());
        for kind in &self.config.retrievers {
            let list = match kind {
                RetrieverKind::Bm25 => self
                    .bm25
                    .as_ref()
                    .ok_or(RetrievalError::RetrieverMissing(*kind))?
                    .query(query_key, query, k),
                RetrieverKind::Dense => {
                    let (index, embedder) = self.dense.as_ref().ok_or(RetrievalError::RetrieverMissing(*kind))?;
                    index.query(embedder.as_ref(), query_key, query, k)?
                }
            };
            lists.push(list);
        }
        if lists.len() == 1 {
            return Ok(lists.pop().expect("one list"));
        }
        Ok(fuse_rrf(&lists, self.config.rrf_constant, k))
    }
}
