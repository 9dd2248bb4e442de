//! Majority vote across demographic variants: plurality over option letters
//! for closed items, and similarity clustering with a medoid pick for open
//! ones.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::embedding::{dot, normalize, Embedder};
use crate::generation::ParsedAnswer;
use crate::scalar::{cmp_desc, Scalar};
use crate::tokenize::tokenize;

pub const DEFAULT_CLUSTER_THRESHOLD: f64 = 0.80;

#[derive(Debug, Error, PartialEq)]
pub enum AggregationError {
    #[error("no parseable answers to vote on")]
    NoParseableAnswers,
    #[error("nothing to aggregate")]
    EmptyInput,
}

/// Plurality count with ties broken toward the smallest answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tally<A> {
    pub winner: A,
    pub counts: BTreeMap<A, usize>,
    pub tie: bool,
}

pub fn tally<A: Ord + Clone>(votes: impl IntoIterator<Item = A>) -> Option<Tally<A>> {
    let mut counts: BTreeMap<A, usize> = BTreeMap::new();
    for v in votes {
        *counts.entry(v).or_default() += 1;
    }
    let max = *counts.values().max()?;
    let mut top = counts.iter().filter(|(_, &c)| c == max).map(|(a, _)| a);
    let winner = top.next().expect("max exists").clone();
    let tie = top.next().is_some();
    Some(Tally { winner, counts, tie })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteResult {
    #[serde(rename = "final")]
    pub final_answer: char,
    pub per_variant: BTreeMap<String, ParsedAnswer>,
    pub counts: BTreeMap<char, usize>,
    pub tie: bool,
}

/// Plurality vote over the parseable answers; unparseable ones are kept in
/// `per_variant` but not counted.
pub fn majority_vote_mcq(answers: &BTreeMap<String, ParsedAnswer>) -> Result<VoteResult, AggregationError> {
    let skipped = answers.values().filter(|a| a.letter().is_none()).count();
    if skipped > 0 {
        warn!(skipped, "unparseable answers excluded from the vote");
    }
    let t = tally(answers.values().filter_map(ParsedAnswer::letter)).ok_or(AggregationError::NoParseableAnswers)?;
    Ok(VoteResult {
        final_answer: t.winner,
        per_variant: answers.clone(),
        counts: t.counts,
        tie: t.tie,
    })
}

/// Which embedder produced the response vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingSource {
    Provider(String),
    TfIdfFallback,
}

/// TF-IDF vectors over the given texts only, unit length. Uses raw term
/// counts and the smoothed `idf = ln((1 + n) / (1 + df)) + 1`; a text with no
/// tokens maps to the zero vector.
pub fn tfidf_vectors<S: Scalar>(texts: &[&str]) -> Vec<Vec<S>> {
    let docs: Vec<BTreeMap<String, usize>> = texts
        .iter()
        .map(|t| {
            let mut tf = BTreeMap::new();
            for tok in tokenize(t) {
                *tf.entry(tok).or_insert(0) += 1;
            }
            tf
        })
        .collect();
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in &docs {
        for term in doc.keys() {
            *df.entry(term.as_str()).or_default() += 1;
        }
    }
    let index: BTreeMap<&str, usize> = df.keys().enumerate().map(|(i, t)| (*t, i)).collect();
    let n = S::from_usize_lossy(texts.len());
    docs.iter()
        .map(|doc| {
            let mut v = vec![S::zero(); index.len()];
            for (term, &count) in doc {
                let d = S::from_usize_lossy(df[term.as_str()]);
                let idf = ((S::one() + n) / (S::one() + d)).ln() + S::one();
                v[index[term.as_str()]] = S::from_usize_lossy(count) * idf;
            }
            normalize(&mut v);
            v
        })
        .collect()
}

/// Unit vectors for `texts`, from `provider` when given and reachable,
/// otherwise from [`tfidf_vectors`].
pub fn embed_responses<S: Scalar>(
    provider: Option<&dyn Embedder<S>>,
    texts: &[&str],
) -> Result<(Vec<Vec<S>>, EmbeddingSource), AggregationError> {
    if texts.is_empty() {
        return Err(AggregationError::EmptyInput);
    }
    if let Some(p) = provider {
        match p.embed(texts) {
            Ok(mut vs) if vs.len() == texts.len() => {
                vs.iter_mut().for_each(|v| normalize(v));
                return Ok((vs, EmbeddingSource::Provider(p.id())));
            }
            Ok(vs) => warn!(
                got = vs.len(),
                want = texts.len(),
                "embedding provider returned wrong row count, using tf-idf"
            ),
            Err(e) => warn!(error = %e, "embedding provider unavailable, using tf-idf"),
        }
    }
    Ok((tfidf_vectors(texts), EmbeddingSource::TfIdfFallback))
}

/// Pairwise cosine of unit vectors, clamped to [-1, 1], with unit diagonal.
pub fn similarity_matrix<S: Scalar>(vectors: &[Vec<S>]) -> Vec<Vec<S>> {
    let n = vectors.len();
    let mut m = vec![vec![S::one(); n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s = dot(&vectors[i], &vectors[j]).max(-S::one()).min(S::one());
            m[i][j] = s;
            m[j][i] = s;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct ResponseCluster<S = f64> {
    pub members: BTreeSet<usize>,
    pub medoid: usize,
    pub mean_internal_similarity: S,
}

impl<S: Scalar> ResponseCluster<S> {
    fn from_members(members: BTreeSet<usize>, sim: &[Vec<S>]) -> Self {
        let ids: Vec<usize> = members.iter().copied().collect();
        if ids.len() == 1 {
            return ResponseCluster {
                medoid: ids[0],
                members,
                mean_internal_similarity: S::one(),
            };
        }
        let others = S::from_usize_lossy(ids.len() - 1);
        let mut best = (ids[0], None::<S>);
        let mut pair_sum = S::zero();
        for &i in &ids {
            let row: S = ids.iter().filter(|&&j| j != i).map(|&j| sim[i][j]).sum();
            pair_sum += row;
            let mean = row / others;
            if best.1.is_none_or(|b| mean > b) {
                best = (i, Some(mean));
            }
        }
        let pairs = S::from_usize_lossy(ids.len() * (ids.len() - 1));
        ResponseCluster {
            medoid: best.0,
            members,
            mean_internal_similarity: pair_sum / pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Connected components of the graph with an edge wherever similarity is at
/// least `threshold`, ordered by size (desc), mean internal similarity
/// (desc), then lowest member index.
pub fn cluster_responses<S: Scalar>(sim: &[Vec<S>], threshold: S) -> Vec<ResponseCluster<S>> {
    let n = sim.len();
    let mut seen = vec![false; n];
    let mut clusters = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut members = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                if !seen[j] && sim[i][j] >= threshold {
                    seen[j] = true;
                    members.insert(j);
                    queue.push_back(j);
                }
            }
        }
        clusters.push(ResponseCluster::from_members(members, sim));
    }
    clusters.sort_by(|a, b| {
        b.len()
            .cmp(&a.len())
            .then_with(|| cmp_desc(a.mean_internal_similarity, b.mean_internal_similarity))
            .then_with(|| a.members.first().cmp(&b.members.first()))
    });
    clusters
}

/// Medoid text of the first cluster.
pub fn select_consensus_response<'a, S: Scalar>(clusters: &[ResponseCluster<S>], texts: &[&'a str]) -> Option<&'a str> {
    clusters.first().map(|c| texts[c.medoid])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct OpenVote<S = f64> {
    pub final_text: String,
    pub medoid_index: usize,
    pub clusters: Vec<ResponseCluster<S>>,
    /// Another cluster is as large as the chosen one.
    pub tie: bool,
    pub embedding_source: EmbeddingSource,
}

/// Embed, cluster at `threshold`, and return the largest cluster's medoid.
pub fn majority_vote_open<S: Scalar>(
    texts: &[&str],
    provider: Option<&dyn Embedder<S>>,
    threshold: S,
) -> Result<OpenVote<S>, AggregationError> {
    let (vectors, embedding_source) = embed_responses(provider, texts)?;
    let clusters = cluster_responses(&similarity_matrix(&vectors), threshold);
    let medoid_index = clusters[0].medoid;
    let tie = clusters.get(1).is_some_and(|c| c.len() == clusters[0].len());
    Ok(OpenVote {
        final_text: texts[medoid_index].to_string(),
        medoid_index,
        clusters,
        tie,
        embedding_source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{EmbedError, HashEmbedder};

    fn answers(letters: &[char]) -> BTreeMap<String, ParsedAnswer> {
        letters
            .iter()
            .enumerate()
            .map(|(i, &l)| (format!("v{i}"), ParsedAnswer::Letter(l)))
            .collect()
    }

    #[test]
    fn vote_examples() {
        let r = majority_vote_mcq(&answers(&['B', 'B', 'B'])).unwrap();
        assert_eq!((r.final_answer, r.tie), ('B', false));
        let r = majority_vote_mcq(&answers(&['A', 'A', 'B', 'C'])).unwrap();
        assert_eq!(r.final_answer, 'A');
        assert_eq!(r.counts, BTreeMap::from([('A', 2), ('B', 1), ('C', 1)]));
        let r = majority_vote_mcq(&answers(&['B', 'B', 'A', 'A'])).unwrap();
        assert_eq!((r.final_answer, r.tie), ('A', true));
    }

    #[test]
    fn unparseable_not_counted() {
        let mut a = answers(&['C']);
        a.insert("x".into(), ParsedAnswer::Unparseable);
        let r = majority_vote_mcq(&a).unwrap();
        assert_eq!(r.counts.values().sum::<usize>(), 1);
        assert_eq!(r.per_variant.len(), 2);
        let none = BTreeMap::from([("x".to_string(), ParsedAnswer::Unparseable)]);
        assert_eq!(majority_vote_mcq(&none).unwrap_err(), AggregationError::NoParseableAnswers);
    }

    #[test]
    fn identical_and_disjoint_texts() {
        let v = tfidf_vectors::<f64>(&["chest pain at rest", "chest pain at rest", "fever chills"]);
        let m = similarity_matrix(&v);
        assert!((m[0][1] - 1.0).abs() < 1e-9);
        assert_eq!(m[0][2], 0.0);
    }

    #[test]
    fn tfidf_matches_scratch_computation() {
        // Scratch evaluation with n = 3, idf = ln(4 / (1 + df)) + 1:
        // "a b", "a c", "b c c" -> sim(0,1) = 0.5, sim(0,2) = 0.316227766..., sim(1,2) = 0.632455532...
        let v = tfidf_vectors::<f64>(&["a b", "a c", "b c c"]);
        let m = similarity_matrix(&v);
        assert!((m[0][1] - 0.5).abs() < 1e-12);
        assert!((m[0][2] - 0.316_227_766_016_837_94).abs() < 1e-12);
        assert!((m[1][2] - 0.632_455_532_033_675_9).abs() < 1e-12);
    }

    struct Down;
    impl Embedder<f64> for Down {
        fn id(&self) -> String {
            "down".into()
        }
        fn embed(&self, _: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
            Err(EmbedError::ProviderUnavailable("offline".into()))
        }
    }

    #[test]
    fn provider_failure_falls_back() {
        let (_, src) = embed_responses::<f64>(Some(&Down), &["x"]).unwrap();
        assert_eq!(src, EmbeddingSource::TfIdfFallback);
        let (_, src) = embed_responses::<f64>(Some(&HashEmbedder::default()), &["x"]).unwrap();
        assert_eq!(src, EmbeddingSource::Provider("hash256".into()));
        assert_eq!(embed_responses::<f64>(None, &[]).unwrap_err(), AggregationError::EmptyInput);
    }

    fn sym(n: usize, edges: &[(usize, usize, f64)], background: f64) -> Vec<Vec<f64>> {
        let mut m = vec![vec![background; n]; n];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for &(i, j, s) in edges {
            m[i][j] = s;
            m[j][i] = s;
        }
        m
    }

    #[test]
    fn complete_and_empty_graphs() {
        assert_eq!(cluster_responses(&sym(4, &[], 0.9), 0.8).len(), 1);
        assert_eq!(cluster_responses(&sym(4, &[], 0.1), 0.8).len(), 4);
    }

    #[test]
    fn chain_plus_isolate() {
        let m = sym(4, &[(0, 1, 0.9), (1, 2, 0.85), (0, 2, 0.5)], 0.1);
        let c = cluster_responses(&m, 0.8);
        assert_eq!(c[0].members, BTreeSet::from([0, 1, 2]));
        assert_eq!(c[1].members, BTreeSet::from([3]));
        // Mean similarity to the others: 0 -> 0.70, 1 -> 0.875, 2 -> 0.675.
        assert_eq!(c[0].medoid, 1);
    }

    #[test]
    fn tighter_cluster_wins_size_tie() {
        let m = sym(4, &[(0, 1, 0.82), (2, 3, 0.97)], 0.0);
        let c = cluster_responses(&m, 0.8);
        assert_eq!(c[0].members, BTreeSet::from([2, 3]));
        let texts = ["a", "b", "c", "d"];
        assert_eq!(select_consensus_response(&c, &texts), Some("c"));
    }

    #[test]
    fn identical_responses_pick_lowest() {
        let v = majority_vote_open::<f64>(&["same", "same", "same"], None, 0.8).unwrap();
        assert_eq!(v.medoid_index, 0);
        assert_eq!(v.final_text, "same");
        assert!(!v.tie);
    }
}
