//! Pluggable text embedders used by dense retrieval and by open-ended
//! majority voting.

use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::http::{HttpClient, HttpError, ModelEndpoint};
use crate::scalar::Scalar;
use crate::tokenize::tokenize;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
}

impl From<HttpError> for EmbedError {
    fn from(e: HttpError) -> Self {
        EmbedError::ProviderUnavailable(e.to_string())
    }
}

pub trait Embedder<S: Scalar>: Send + Sync {
    fn id(&self) -> String;
    /// One vector per input text, all of the same dimension.
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<S>>, EmbedError>;
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

/// Scale to unit length; the zero vector is left as is.
pub fn normalize<S: Scalar>(v: &mut [S]) {
    let n = norm(v);
    if n > S::zero() {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Cosine similarity; 0 when either side is the zero vector.
pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> S {
    let (na, nb) = (norm(a), norm(b));
    if na == S::zero() || nb == S::zero() {
        return S::zero();
    }
    dot(a, b) / (na * nb)
}

/// Offline, deterministic embedder: each token is hashed to a signed
/// coordinate (feature hashing) and the result is L2-normalized.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashEmbedder { dim }
    }

    fn embed_one<S: Scalar>(&self, text: &str) -> Vec<S> {
        let mut v = vec![S::zero(); self.dim];
        for tok in tokenize(text) {
            let digest = Sha256::digest(tok.as_bytes());
            let h = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
            let slot = (h % self.dim as u64) as usize;
            if digest[8] & 1 == 0 {
                v[slot] += S::one();
            } else {
                v[slot] -= S::one();
            }
        }
        normalize(&mut v);
        v
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(256)
    }
}

impl<S: Scalar> Embedder<S> for HashEmbedder {
    fn id(&self) -> String {
        format!("hash{}", self.dim)
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<S>>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Client for an `embeddings`-style JSON route:
/// request `{"model", "input": [..]}`, response `{"data": [{"index", "embedding"}]}`.
pub struct RemoteEmbedder {
    client: HttpClient,
}

impl RemoteEmbedder {
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, EmbedError> {
        Ok(RemoteEmbedder {
            client: HttpClient::new(endpoint)?,
        })
    }
}

impl<S: Scalar> Embedder<S> for RemoteEmbedder {
    fn id(&self) -> String {
        format!("remote:{}", self.client.endpoint().model_name)
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<S>>, EmbedError> {
        let body = json!({ "model": self.client.endpoint().model_name, "input": texts });
        let resp = self.client.post_json("embeddings", &body)?;
        let malformed = |m: &str| EmbedError::ProviderUnavailable(format!("malformed embeddings response: {m}"));
        let data = resp
            .body
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| malformed("missing data"))?;
        let mut out: Vec<Option<Vec<S>>> = vec![None; texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let idx = item.get("index").and_then(|i| i.as_u64()).map_or(pos, |i| i as usize);
            let vec = item
                .get("embedding")
                .and_then(|e| e.as_array())
                .ok_or_else(|| malformed("missing embedding"))?
                .iter()
                .map(|x| x.as_f64().map(S::from_f64_lossy))
                .collect::<Option<Vec<S>>>()
                .ok_or_else(|| malformed("non-numeric component"))?;
            *out.get_mut(idx).ok_or_else(|| malformed("index out of range"))? = Some(vec);
        }
        let out: Vec<Vec<S>> = out.into_iter().collect::<Option<_>>().ok_or_else(|| malformed("missing rows"))?;
        check_dims(&out)?;
        Ok(out)
    }
}

pub(crate) fn check_dims<S>(vectors: &[Vec<S>]) -> Result<usize, EmbedError> {
    let Some(first) = vectors.first() else { return Ok(0) };
    let expected = first.len();
    match vectors.iter().find(|v| v.len() != expected) {
        Some(v) => Err(EmbedError::DimMismatch { expected, got: v.len() }),
        None => Ok(expected),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_embedder_is_deterministic_and_unit_norm() {
        let e = HashEmbedder::new(64);
        let a: Vec<Vec<f64>> = e.embed(&["chest pain in adults", "chest pain in adults"]).unwrap();
        assert_eq!(a[0], a[1]);
        assert!((norm(&a[0]) - 1.0).abs() < 1e-12);
        let z: Vec<Vec<f32>> = e.embed(&["..."]).unwrap();
        assert!(z[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cosine_handles_zero() {
        assert_eq!(cosine(&[0.0f64, 0.0], &[1.0, 0.0]), 0.0);
        assert!((cosine(&[1.0f64, 1.0], &[2.0, 2.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dims_checked() {
        assert!(check_dims(&[vec![1.0f64, 2.0], vec![1.0]]).is_err());
        assert_eq!(check_dims::<f64>(&[]).unwrap(), 0);
    }
}
