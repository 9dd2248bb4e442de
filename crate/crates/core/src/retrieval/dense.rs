use super::{top_k, RankedEntry, RankedList, RetrievalError};
use crate::corpus::SnippetStore;
use crate::embedding::{check_dims, normalize, Embedder};
use crate::scalar::Scalar;

const EMBED_BATCH: usize = 64;

/// Precomputed, unit-normalized snippet embeddings ranked by cosine similarity.
#[derive(Debug, Clone)]
pub struct DenseIndex<S: Scalar = f64> {
    embedder_id: String,
    snippet_ids: Vec<String>,
    vectors: Vec<Vec<S>>,
    dim: usize,
}

impl<S: Scalar> DenseIndex<S> {
    pub fn build(embedder: &dyn Embedder<S>, store: &SnippetStore) -> Result<Self, RetrievalError> {
        if store.is_empty() {
            return Err(RetrievalError::EmptyStore);
        }
        let mut vectors = Vec::with_capacity(store.len());
        for chunk in store.snippets().chunks(EMBED_BATCH) {
            let texts: Vec<&str> = chunk.iter().map(|s| s.text.as_str()).collect();
            vectors.extend(embedder.embed(&texts)?);
        }
        let ids = store.snippets().iter().map(|s| s.id.clone()).collect();
        Self::from_embeddings(embedder.id(), ids, vectors)
    }

    pub fn from_embeddings(
        embedder_id: impl Into<String>,
        snippet_ids: Vec<String>,
        mut vectors: Vec<Vec<S>>,
    ) -> Result<Self, RetrievalError> {
        assert_eq!(snippet_ids.len(), vectors.len(), "one embedding per snippet");
        let dim = check_dims(&vectors)?;
        vectors.iter_mut().for_each(|v| normalize(v));
        Ok(DenseIndex {
            embedder_id: embedder_id.into(),
            snippet_ids,
            vectors,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn query(&self, embedder: &dyn Embedder<S>, query_key: &str, query: &str, k: usize) -> Result<RankedList<S>, RetrievalError> {
        let mut q = embedder
            .embed(&[query])?
            .pop()
            .ok_or_else(|| RetrievalError::ProviderUnavailable("no embedding returned".into()))?;
        normalize(&mut q);
        self.query_vector(query_key, &q, k)
    }

    /// Rank by cosine against an already computed query embedding.
    pub fn query_vector(&self, query_key: &str, q: &[S], k: usize) -> Result<RankedList<S>, RetrievalError> {
        if q.len() != self.dim {
            return Err(RetrievalError::EmbeddingDimMismatch {
                expected: self.dim,
                got: q.len(),
            });
        }
        let mut q = q.to_vec();
        normalize(&mut q);
        let entries = self
            .snippet_ids
            .iter()
            .zip(&self.vectors)
            .map(|(id, v)| RankedEntry {
                snippet_id: id.clone(),
                score: crate::embedding::dot(&q, v),
            })
            .collect();
        Ok(RankedList {
            query_key: query_key.to_string(),
            retriever_id: format!("dense:{}", self.embedder_id),
            entries: top_k(entries, k),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> DenseIndex<f64> {
        DenseIndex::from_embeddings(
            "toy",
            vec!["s:a:0".into(), "s:b:0".into(), "s:c:0".into(), "s:d:0".into()],
            vec![vec![1.0, 0.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 2.0], vec![1.0, 2.0, 3.0]],
        )
        .unwrap()
    }

    #[test]
    fn self_similarity_ranks_first() {
        let list = toy().query_vector("q", &[1.0, 2.0, 3.0], 4).unwrap();
        assert_eq!(list.entries[0].snippet_id, "s:d:0");
        assert!((list.entries[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn order_matches_brute_force_cosine() {
        // Cosines against q = (1, 1, 1), computed independently:
        // a: 1/sqrt(3) = 0.5774, b: 2/sqrt(6) = 0.8165, c: 0.5774, d: 6/sqrt(42) = 0.9258
        let list = toy().query_vector("q", &[1.0, 1.0, 1.0], 4).unwrap();
        let ids: Vec<_> = list.ids().collect();
        assert_eq!(ids, vec!["s:d:0", "s:b:0", "s:a:0", "s:c:0"]);
        let expected = [
            0.925_820_099_772_551_5,
            0.816_496_580_927_726,
            0.577_350_269_189_625_7,
            0.577_350_269_189_625_7,
        ];
        for (e, x) in list.entries.iter().zip(expected) {
            assert!((e.score - x).abs() < 1e-12);
        }
    }

    #[test]
    fn k_beyond_store_returns_everything() {
        assert_eq!(toy().query_vector("q", &[0.0, 1.0, 0.0], 50).unwrap().len(), 4);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            toy().query_vector("q", &[1.0, 0.0], 2),
            Err(RetrievalError::EmbeddingDimMismatch { expected: 3, got: 2 })
        ));
        assert!(DenseIndex::<f64>::from_embeddings("x", vec!["a".into(), "b".into()], vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
