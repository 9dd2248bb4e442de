//! Okapi BM25 over an inverted index.
//!
//! `idf(t) = ln((N - df + 0.5) / (df + 0.5) + 1)`, which stays positive even
//! for terms present in every snippet.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{top_k, RankedEntry, RankedList, RetrievalError};
use crate::corpus::SnippetStore;
use crate::scalar::Scalar;
use crate::tokenize::tokenize;

pub const BM25_MAGIC: &str = "equirag-bm25";
pub const BM25_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    /// Position of the snippet in `snippet_ids`.
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Bm25Index<S = f64> {
    magic: String,
    version: u32,
    k1: S,
    b: S,
    snippet_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    avg_length: S,
    postings: BTreeMap<String, Vec<Posting>>,
}

impl<S: Scalar> Bm25Index<S> {
    pub fn build(store: &SnippetStore, k1: S, b: S) -> Result<Self, RetrievalError> {
        if store.is_empty() {
            return Err(RetrievalError::EmptyStore);
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut snippet_ids = Vec::with_capacity(store.len());
        let mut doc_lengths = Vec::with_capacity(store.len());
        let mut total: u64 = 0;
        for (doc, snippet) in store.snippets().iter().enumerate() {
            let tokens = tokenize(&snippet.text);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens.iter() {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: doc as u32,
                    tf: count,
                });
            }
            snippet_ids.push(snippet.id.clone());
            doc_lengths.push(tokens.len() as u32);
            total += tokens.len() as u64;
        }
        let avg_length = S::from_f64_lossy(total as f64) / S::from_usize_lossy(snippet_ids.len());
        Ok(Bm25Index {
            magic: BM25_MAGIC.to_string(),
            version: BM25_VERSION,
            k1,
            b,
            snippet_ids,
            doc_lengths,
            avg_length,
            postings,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.snippet_ids.len()
    }

    pub fn avg_length(&self) -> S {
        self.avg_length
    }

    pub fn params(&self) -> (S, S) {
        (self.k1, self.b)
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn doc_length(&self, snippet_id: &str) -> Option<u32> {
        self.snippet_ids.iter().position(|s| s == snippet_id).map(|i| self.doc_lengths[i])
    }

    pub fn idf(&self, df: usize) -> S {
        let half = S::from_f64_lossy(0.5);
        let n = S::from_usize_lossy(self.num_docs());
        let df = S::from_usize_lossy(df);
        ((n - df + half) / (df + half) + S::one()).ln()
    }

    /// Contribution of one query term with frequency `tf` in a snippet of `len` tokens.
    pub fn term_score(&self, idf: S, tf: u32, len: u32) -> S {
        let tf = S::from_f64_lossy(tf as f64);
        let len = S::from_f64_lossy(len as f64);
        let norm = self.k1 * (S::one() - self.b + self.b * len / self.avg_length);
        idf * (tf * (self.k1 + S::one())) / (tf + norm)
    }

    /// Top-k snippets sharing at least one (distinct) query term.
    pub fn query(&self, query_key: &str, query: &str, k: usize) -> RankedList<S> {
        let retriever_id = "bm25".to_string();
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        if terms.is_empty() {
            warn!(query_key, "query is empty after tokenization");
            return RankedList::empty(query_key, retriever_id);
        }
        let mut scores: Vec<Option<S>> = vec![None; self.num_docs()];
        for term in &terms {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.idf(list.len());
            for p in list {
                let slot = &mut scores[p.doc as usize];
                let add = self.term_score(idf, p.tf, self.doc_lengths[p.doc as usize]);
                *slot = Some(slot.map_or(add, |s| s + add));
            }
        }
        let entries = scores
            .into_iter()
            .enumerate()
            .filter_map(|(doc, s)| {
                s.map(|score| RankedEntry {
                    snippet_id: self.snippet_ids[doc].clone(),
                    score,
                })
            })
            .collect();
        RankedList {
            query_key: query_key.to_string(),
            retriever_id,
            entries: top_k(entries, k),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("index serializes")
    }

    pub fn from_json(raw: &str) -> Result<Self, RetrievalError> {
        #[derive(Deserialize)]
        struct Header {
            magic: String,
            version: u32,
        }
        let header: Header = serde_json::from_str(raw)?;
        if header.magic != BM25_MAGIC {
            return Err(RetrievalError::BadMagic(header.magic));
        }
        if header.version != BM25_VERSION {
            return Err(RetrievalError::UnsupportedVersion(header.version));
        }
        Ok(serde_json::from_str(raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
