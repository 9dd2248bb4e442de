//! Corpus ingestion: documents in, fixed-window token snippets out.
//!
//! A snippet store on disk is one `snippets.<source>.jsonl` file per source
//! plus a `manifest.json`. Stores are written once and treated as immutable.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::tokenize::{normalize_whitespace, tokenize_with_spans};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate document id `{doc_id}` in source {source_name}")]
    DuplicateDocId { source_name: Source, doc_id: String },
    #[error("duplicate snippet id `{0}`")]
    DuplicateSnippetId(String),
    #[error("chunk config mismatch: {0} vs {1}")]
    ChunkConfigMismatch(ChunkConfig, ChunkConfig),
    #[error("invalid chunk config: {0}")]
    InvalidChunkConfig(String),
    #[error("invalid snippet id `{0}`")]
    InvalidSnippetId(String),
    #[error("unknown source `{0}` (expected pubmed, textbook or wikipedia)")]
    UnknownSource(String),
    #[error("manifest says {expected} snippets but store holds {actual}")]
    CountMismatch { expected: usize, actual: usize },
    #[error("nothing to merge")]
    NothingToMerge,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Pubmed,
    Textbook,
    Wikipedia,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Pubmed, Source::Textbook, Source::Wikipedia];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Pubmed => "pubmed",
            Source::Textbook => "textbook",
            Source::Wikipedia => "wikipedia",
        }
    }

    pub fn snippet_file(self) -> String {
        format!("snippets.{}.jsonl", self.as_str())
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pubmed" => Ok(Source::Pubmed),
            "textbook" | "textbooks" => Ok(Source::Textbook),
            "wikipedia" => Ok(Source::Wikipedia),
            _ => Err(CorpusError::UnknownSource(s.to_string())),
        }
    }
}

/// `<source>:<doc>:<chunk_index>`. The doc part may itself contain colons.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SnippetId {
    pub source: Source,
    pub doc_id: String,
    pub chunk_index: usize,
}

impl SnippetId {
    pub fn parse(id: &str) -> Result<Self, CorpusError> {
        let bad = || CorpusError::InvalidSnippetId(id.to_string());
        let (source, rest) = id.split_once(':').ok_or_else(bad)?;
        let (doc_id, chunk) = rest.rsplit_once(':').ok_or_else(bad)?;
        if doc_id.is_empty() {
            return Err(bad());
        }
        Ok(SnippetId {
            source: source.parse().map_err(|_| bad())?,
            doc_id: doc_id.to_string(),
            chunk_index: chunk.parse().map_err(|_| bad())?,
        })
    }
}

impl fmt::Display for SnippetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.source, self.doc_id, self.chunk_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub id: String,
    pub source: Source,
    /// Offset of the first token of this snippet within its document.
    pub start_token: usize,
    pub token_count: usize,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkConfig {
    pub window: usize,
    pub stride: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        ChunkConfig { window: 512, stride: 512 }
    }
}

impl fmt::Display for ChunkConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "window={} stride={}", self.window, self.stride)
    }
}

impl ChunkConfig {
    pub fn new(window: usize, stride: usize) -> Result<Self, CorpusError> {
        let cfg = ChunkConfig { window, stride };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.window == 0 || self.stride == 0 {
            return Err(CorpusError::InvalidChunkConfig("window and stride must be at least 1".into()));
        }
        if self.stride > self.window {
            return Err(CorpusError::InvalidChunkConfig(format!(
                "stride {} exceeds window {}; text would be skipped",
                self.stride, self.window
            )));
        }
        Ok(())
    }

    /// Token extents `[start, end)` of each chunk for a document of `n` tokens.
    ///
    /// Windows start at multiples of the stride; the last window is the first
    /// one that reaches the end of the document.
    pub fn spans(&self, n: usize) -> Vec<(usize, usize)> {
        let mut spans = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + self.window).min(n);
            spans.push((start, end));
            if end == n {
                break;
            }
            start += self.stride;
        }
        spans
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub source: Source,
    pub doc_id: String,
    pub text: String,
}

/// Chunk documents into snippets. Output order follows input order; chunk
/// indices within a document are 0-based.
pub fn ingest_documents(docs: &[Document], cfg: &ChunkConfig) -> Result<Vec<Snippet>, CorpusError> {
    cfg.validate()?;
    let mut seen = HashSet::new();
    for doc in docs {
        if !seen.insert((doc.source, doc.doc_id.as_str())) {
            return Err(CorpusError::DuplicateDocId {
                source_name: doc.source,
                doc_id: doc.doc_id.clone(),
            });
        }
    }

    let per_doc: Vec<Vec<Snippet>> = docs.par_iter().map(|doc| chunk_document(doc, cfg)).collect();
    Ok(per_doc.into_iter().flatten().collect())
}

fn chunk_document(doc: &Document, cfg: &ChunkConfig) -> Vec<Snippet> {
    let tokens = tokenize_with_spans(&doc.text);
    if tokens.is_empty() {
        warn!(source = %doc.source, doc_id = %doc.doc_id, "skipping empty document");
        return Vec::new();
    }
    cfg.spans(tokens.len())
        .into_iter()
        .enumerate()
        .map(|(chunk_index, (start, end))| {
            let byte_start = tokens[start].start;
            let byte_end = tokens[end - 1].end;
            Snippet {
                id: SnippetId {
                    source: doc.source,
                    doc_id: doc.doc_id.clone(),
                    chunk_index,
                }
                .to_string(),
                source: doc.source,
                start_token: start,
                token_count: end - start,
                text: normalize_whitespace(&doc.text[byte_start..byte_end]),
            }
        })
        .collect()
}

/// Read raw documents from a directory: `*.txt` files (doc id = file stem)
/// and `*.jsonl` files with `{"doc_id": ..., "text": ...}` per line.
/// Files are visited in name order.
pub fn read_documents(source: Source, dir: &Path) -> Result<Vec<Document>, CorpusError> {
    #[derive(Deserialize)]
    struct Line {
        doc_id: String,
        text: String,
    }

    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();

    let mut docs = Vec::new();
    for path in paths {
        match path.extension().and_then(|e| e.to_str()) {
            Some("txt") => {
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                let doc_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                docs.push(Document { source, doc_id, text });
            }
            Some("jsonl") => {
                let file = fs::File::open(&path).map_err(io_err(&path))?;
                for (i, line) in BufReader::new(file).lines().enumerate() {
                    let line = line.map_err(io_err(&path))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let parsed: Line = serde_json::from_str(&line).map_err(|source| CorpusError::Json {
                        path: path.clone(),
                        line: i + 1,
                        source,
                    })?;
                    docs.push(Document {
                        source,
                        doc_id: parsed.doc_id,
                        text: parsed.text,
                    });
                }
            }
            _ => debug!(path = %path.display(), "ignoring file with unsupported extension"),
        }
    }
    Ok(docs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub name: String,
    pub sources: BTreeSet<Source>,
    pub snippet_count: usize,
    pub chunk_window: usize,
    pub chunk_stride: usize,
}

impl CorpusManifest {
    pub fn chunk_config(&self) -> ChunkConfig {
        ChunkConfig {
            window: self.chunk_window,
            stride: self.chunk_stride,
        }
    }
}

/// In-memory snippet store. Snippets are kept grouped by source (in
/// [`Source`] order), preserving ingestion order within a source.
#[derive(Debug, Clone)]
pub struct SnippetStore {
    manifest: CorpusManifest,
    snippets: Vec<Snippet>,
    by_id: HashMap<String, usize>,
}

impl PartialEq for SnippetStore {
    fn eq(&self, other: &Self) -> bool {
        self.manifest == other.manifest && self.snippets == other.snippets
    }
}

impl SnippetStore {
    pub fn new(name: impl Into<String>, cfg: ChunkConfig, mut snippets: Vec<Snippet>) -> Result<Self, CorpusError> {
        cfg.validate()?;
        snippets.sort_by_key(|s| s.source);
        let mut by_id = HashMap::with_capacity(snippets.len());
        for (i, s) in snippets.iter().enumerate() {
            if by_id.insert(s.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateSnippetId(s.id.clone()));
            }
        }
        let manifest = CorpusManifest {
            name: name.into(),
            sources: snippets.iter().map(|s| s.source).collect(),
            snippet_count: snippets.len(),
            chunk_window: cfg.window,
            chunk_stride: cfg.stride,
        };
        Ok(SnippetStore { manifest, snippets, by_id })
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn snippets(&self) -> &[Snippet] {
        &self.snippets
    }

    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Snippet> {
        self.by_id.get(id).map(|&i| &self.snippets[i])
    }

    /// Distinct `(source, doc_id)` pairs present in the store.
    pub fn doc_keys(&self) -> BTreeSet<(Source, String)> {
        self.snippets
            .iter()
            .filter_map(|s| SnippetId::parse(&s.id).ok())
            .map(|id| (id.source, id.doc_id))
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for source in &self.manifest.sources {
            let path = dir.join(source.snippet_file());
            let file = fs::File::create(&path).map_err(io_err(&path))?;
            let mut w = BufWriter::new(file);
            for s in self.snippets.iter().filter(|s| s.source == *source) {
                let line = serde_json::to_string(s).expect("snippet serializes");
                writeln!(w, "{line}").map_err(io_err(&path))?;
            }
            w.flush().map_err(io_err(&path))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(io_err(&path))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let path = dir.join(MANIFEST_FILE);
        let raw = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: CorpusManifest = serde_json::from_str(&raw).map_err(|source| CorpusError::Json { path, line: 1, source })?;

        let mut snippets = Vec::with_capacity(manifest.snippet_count);
        for source in &manifest.sources {
            let path = dir.join(source.snippet_file());
            let file = fs::File::open(&path).map_err(io_err(&path))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io_err(&path))?;
                if line.trim().is_empty() {
                    continue;
                }
                let s: Snippet = serde_json::from_str(&line).map_err(|source| CorpusError::Json {
                    path: path.clone(),
                    line: i + 1,
                    source,
                })?;
                snippets.push(s);
            }
        }
        if snippets.len() != manifest.snippet_count {
            return Err(CorpusError::CountMismatch {
                expected: manifest.snippet_count,
                actual: snippets.len(),
            });
        }
        let store = SnippetStore::new(manifest.name.clone(), manifest.chunk_config(), snippets)?;
        Ok(store)
    }
}

/// Merge several stores into one (e.g. a combined medical corpus).
/// All inputs must share the chunk config; a `(source, doc_id)` pair may
/// appear in only one input.
pub fn merge_corpora(stores: Vec<SnippetStore>, name: &str) -> Result<SnippetStore, CorpusError> {
    let first_cfg = stores.first().ok_or(CorpusError::NothingToMerge)?.manifest.chunk_config();
    let mut seen_docs: HashSet<(Source, String)> = HashSet::new();
    let mut all = Vec::new();
    for store in stores {
        let cfg = store.manifest.chunk_config();
        if cfg != first_cfg {
            return Err(CorpusError::ChunkConfigMismatch(first_cfg, cfg));
        }
        for key in store.doc_keys() {
            if !seen_docs.insert(key.clone()) {
                return Err(CorpusError::DuplicateDocId {
                    source_name: key.0,
                    doc_id: key.1,
                });
            }
        }
        all.extend(store.snippets);
    }
    SnippetStore::new(name, first_cfg, all)
}
