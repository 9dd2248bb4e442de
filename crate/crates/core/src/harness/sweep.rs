use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ConfigError, ExperimentConfig};
use super::run::{io_err, run_experiment, write_file, RunError};
use crate::prompts::FilterStrategy;
use crate::retrieval::RetrieverKind;

pub const SWEEP_JSON: &str = "sweep.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_MD: &str = "sweep.md";

/// Axes of an ablation grid. An absent axis keeps the base config's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub strategies: Vec<FilterStrategy>,
    #[serde(default)]
    pub majority_vote: Vec<bool>,
    /// Each entry is one retriever set, e.g. `["bm25"]` or `["bm25", "dense"]`.
    #[serde(default)]
    pub retrievers: Vec<BTreeSet<RetrieverKind>>,
    #[serde(default)]
    pub k: Vec<usize>,
}

fn or_base<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl SweepGrid {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let parse_err = |message: String| ConfigError::Parse {
            path: path.display().to_string(),
            message,
        };
        if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| parse_err(e.to_string()))
        } else {
            serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))
        }
    }

    /// Cell configs in (strategy, majority vote, retrievers, k) order.
    pub fn cells(&self, base: &ExperimentConfig) -> Vec<ExperimentConfig> {
        let strategies = or_base(&self.strategies, base.strategy);
        let mvs = or_base(&self.majority_vote, base.majority_vote);
        let retrievers = or_base(&self.retrievers, base.retrieval.retrievers.clone());
        let ks = or_base(&self.k, base.retrieval.k);
        let mut out = Vec::new();
        for &s in &strategies {
            for &mv in &mvs {
                for r in &retrievers {
                    for &k in &ks {
                        let mut c = base.clone();
                        c.strategy = s;
                        c.majority_vote = mv;
                        c.retrieval.retrievers = r.clone();
                        c.retrieval.k = k;
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: FilterStrategy,
    pub majority_vote: bool,
    pub retriever: String,
    pub k: usize,
    pub score: Option<f64>,
    pub overlap: Option<f64>,
    pub dp: Option<f64>,
    pub eo: Option<f64>,
    pub fingerprint: String,
    pub run_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "strategy",
            "majority_vote",
            "retriever",
            "k",
            "score",
            "overlap",
            "dp",
            "eo",
            "fingerprint",
        ])
        .expect("in-memory csv");
        let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.rows {
            w.write_record([
                r.strategy.to_string(),
                r.majority_vote.to_string(),
                r.retriever.clone(),
                r.k.to_string(),
                f(r.score),
                f(r.overlap),
                f(r.dp),
                f(r.eo),
                r.fingerprint.clone(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn to_markdown(&self) -> String {
        let f2 = |v: Option<f64>| v.map_or("n/a".into(), |x| format!("{x:.2}"));
        let f4 = |v: Option<f64>| v.map_or("n/a".into(), |x| format!("{x:.4}"));
        let mut s = String::from("| Strategy | MV | Retriever | k | Score | Overlap | DP | EO |\n|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                r.strategy,
                if r.majority_vote { "on" } else { "off" },
                r.retriever,
                r.k,
                f2(r.score),
                f2(r.overlap),
                f4(r.dp),
                f4(r.eo)
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub sweep_dir: PathBuf,
    pub table: SweepTable,
}

/// One run per grid cell under `<output_dir>/sweep-<timestamp>-<hash>/`, plus
/// `sweep.{json,csv,md}` comparing them.
pub fn run_ablation_suite(base: &ExperimentConfig, grid: &SweepGrid) -> Result<SweepSummary, RunError> {
    base.validate()?;
    let cells = grid.cells(base);
    for c in &cells {
        c.validate()?;
    }
    let mut h = Sha256::new();
    h.update(base.to_json().as_bytes());
    h.update(serde_json::to_string(grid).expect("grid serializes").as_bytes());
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ");
    let sweep_dir = base.output_dir.join(format!("sweep-{stamp}-{}", &hex::encode(h.finalize())[..12]));
    fs::create_dir_all(&sweep_dir).map_err(io_err(&sweep_dir))?;

    let mut rows = Vec::with_capacity(cells.len());
    for mut cell in cells {
        cell.output_dir = sweep_dir.clone();
        let summary = run_experiment(cell.clone())?;
        let m = &summary.report.metrics;
        rows.push(SweepRow {
            strategy: cell.strategy,
            majority_vote: cell.majority_vote,
            retriever: cell.retrieval.retriever_label(),
            k: cell.retrieval.k,
            score: summary.report.score(),
            overlap: m.retrieval_overlap,
            dp: m.dp,
            eo: m.eo,
            fingerprint: summary.report.fingerprint.clone(),
            run_dir: summary
                .run_dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        });
    }
    let table = SweepTable { rows };
    write_file(
        &sweep_dir.join(SWEEP_JSON),
        &(serde_json::to_string_pretty(&table).expect("table serializes") + "\n"),
    )?;
    write_file(&sweep_dir.join(SWEEP_CSV), &table.to_csv())?;
    write_file(&sweep_dir.join(SWEEP_MD), &table.to_markdown())?;
    Ok(SweepSummary { sweep_dir, table })
}
