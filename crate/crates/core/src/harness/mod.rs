//! End-to-end experiments: dataset loading, per-variant retrieval, prompting
//! and generation, optional majority vote, scoring, and the run directory.

pub mod config;
pub mod dataset;
pub mod report;
pub mod run;
pub mod sweep;

pub use config::{ConfigError, EmbeddingConfig, ExperimentConfig, MockRates, ModelConfig};
pub use dataset::{load_dataset, parse_dataset, DatasetError, DatasetItem, Task};
pub use report::{compare_reports, load_report, recompute_report, ReportFormat, RunReport};
pub use run::{config_fingerprint, run_experiment, Pipeline, RunError, RunSummary};
pub use sweep::{run_ablation_suite, SweepGrid, SweepTable};
