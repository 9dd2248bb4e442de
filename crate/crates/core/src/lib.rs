//! Fairness evaluation for retrieval-augmented medical question answering.
//!
//! A run takes a QA dataset and a snippet corpus, expands every question
//! into demographic variants, retrieves evidence per variant (BM25, dense,
//! or both fused with reciprocal rank fusion), prompts a model under one of
//! four filtering strategies, optionally aggregates the variants' answers by
//! majority vote, and reports accuracy, ROUGE-L, retrieval overlap and the
//! DP/EO disparities per demographic group.
//!
//! Numeric kernels are generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix them to `f64`, which is what the harness
//! uses.

pub mod aggregation;
pub mod corpus;
pub mod embedding;
pub mod generation;
pub mod harness;
pub mod http;
pub mod metrics;
pub mod prompts;
pub mod retrieval;
pub mod scalar;
pub mod tokenize;
pub mod variants;

pub use corpus::{ChunkConfig, Snippet, SnippetStore, Source};
pub use generation::{ChatModel, MockModel, MockModelSpec, ParsedAnswer};
pub use harness::{run_ablation_suite, run_experiment, ExperimentConfig, RunReport};
pub use metrics::{Grouping, PredictionRecord};
pub use prompts::FilterStrategy;
pub use scalar::Scalar;
pub use variants::{Assignment, Axis, DemographicConfig, QueryVariant};

pub type RankedEntry = retrieval::RankedEntry<f64>;
pub type RankedList = retrieval::RankedList<f64>;
pub type Bm25Index = retrieval::Bm25Index<f64>;
pub type DenseIndex = retrieval::DenseIndex<f64>;
pub type RetrievalEngine = retrieval::RetrievalEngine<f64>;
pub type ResponseCluster = aggregation::ResponseCluster<f64>;
pub type MetricsReport = metrics::MetricsReport<f64>;
pub type Disparity = metrics::Disparity<f64>;
