use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{
    io_err, known_groups, read_jsonl, write_file, AuditEntry, ItemError, RunError, AUDIT_FILE, CONFIG_FILE, ERRORS_FILE, RECORDS_FILE,
};
use crate::metrics::{compute_report, overlap_of_sets, GroupRate, MetricsReport, PredictionRecord, ReportInputs};
use crate::prompts::FilterStrategy;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_MD: &str = "report.md";

/// How closed-form answers were extracted; printed with every report.
pub const PARSE_LADDER: &str =
    "`Final Answer: X` / `Answer: X` marker, else a single standalone option letter, else a unique option-text match; otherwise unparseable (scored incorrect)";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown format `{other}` (md, csv, json)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub fingerprint: String,
    pub dataset: String,
    pub model: String,
    pub strategy: FilterStrategy,
    pub majority_vote: bool,
    pub retriever: String,
    pub k: usize,
    pub seed: u64,
    pub items: usize,
    pub failed_items: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_items: Option<usize>,
    pub tau_c: f64,
    pub answer_parsing: String,
    pub metrics: MetricsReport<f64>,
}

impl RunReport {
    /// Accuracy for closed-form runs, mean ROUGE-L otherwise.
    pub fn score(&self) -> Option<f64> {
        self.metrics.accuracy.or(self.metrics.mean_rouge_l)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let row = |w: &mut csv::Writer<Vec<u8>>, metric: &str, grouping: &str, group: &str, n: String, value: String| {
            w.write_record([metric, grouping, group, &n, &value]).expect("in-memory csv");
        };
        row(&mut w, "metric", "grouping", "group", "n".into(), "value".into());
        let m = &self.metrics;
        let n = m.records.to_string();
        for (name, v) in [
            ("accuracy", m.accuracy),
            ("mean_rouge_l", m.mean_rouge_l),
            ("retrieval_overlap", m.retrieval_overlap),
            ("tie_rate", m.tie_rate),
            ("counterfactual_inconsistency_rate", m.counterfactual_inconsistency_rate),
        ] {
            row(&mut w, name, "", "", n.clone(), opt_raw(v));
        }
        row(&mut w, "tau_r", "", "", String::new(), m.tau_r.to_string());
        for b in &m.breakdowns {
            let g = b.grouping.as_str();
            row(&mut w, "dp", g, "", String::new(), opt_raw(b.dp));
            row(&mut w, "eo", g, "", String::new(), opt_raw(b.eo));
            for (group, r) in &b.per_group {
                row(&mut w, "group_rate", g, group, r.n.to_string(), r.rate.to_string());
            }
            for (group, r) in &b.eo_per_group {
                row(&mut w, "group_rate_answerable", g, group, r.n.to_string(), r.rate.to_string());
            }
            for group in &b.excluded_groups {
                row(&mut w, "excluded", g, group, "0".into(), String::new());
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn to_markdown(&self) -> String {
        let m = &self.metrics;
        let mut s = String::new();
        let title = self.name.as_deref().unwrap_or("Experiment report");
        let _ = writeln!(s, "# {title}\n");
        let _ = writeln!(s, "- Config fingerprint: `{}`", self.fingerprint);
        let _ = writeln!(
            s,
            "- Dataset: {} ({} items, {} failed{})",
            self.dataset,
            self.items,
            self.failed_items,
            self.max_items.map_or(String::new(), |n| format!(", max_items {n}"))
        );
        let _ = writeln!(
            s,
            "- Model: {} · strategy: {} · majority vote: {}",
            self.model,
            self.strategy,
            if self.majority_vote { "on" } else { "off" }
        );
        let _ = writeln!(s, "- Retrieval: {} · k = {} · seed = {}", self.retriever, self.k, self.seed);
        let _ = writeln!(
            s,
            "- τ_r (open-answer correctness threshold) = {} · τ_c (cluster threshold) = {}",
            m.tau_r, self.tau_c
        );
        let _ = writeln!(s, "- Answer parsing: {PARSE_LADDER}\n");

        let _ = writeln!(s, "## Headline\n");
        let _ = writeln!(s, "| Metric | Value |\n|---|---|");
        let _ = writeln!(s, "| Accuracy (%) | {} |", opt2(m.accuracy));
        let _ = writeln!(s, "| Mean ROUGE-L (%) | {} |", opt2(m.mean_rouge_l));
        let _ = writeln!(s, "| Retrieval overlap (%) | {} |", opt2(m.retrieval_overlap));
        let _ = writeln!(s, "| DP disparity ({}) | {} |", m.grouping, opt4(m.dp));
        let _ = writeln!(s, "| EO disparity ({}) | {} |", m.grouping, opt4(m.eo));
        let _ = writeln!(s, "| Tie rate | {} |", opt4(m.tie_rate));
        let _ = writeln!(
            s,
            "| Counterfactual inconsistency rate | {} |",
            opt4(m.counterfactual_inconsistency_rate)
        );
        let _ = writeln!(s, "| Records | {} |\n", m.records);

        let _ = writeln!(s, "## Per-group correct rate ({})\n", m.grouping);
        group_table(&mut s, &m.per_group);
        let _ = writeln!(s, "\nExcluded groups (zero denominator): {}\n", list_or_none(&m.excluded_groups));

        let _ = writeln!(s, "## Fairness by grouping\n");
        let _ = writeln!(s, "| Grouping | DP | EO | Groups | Excluded |\n|---|---|---|---|---|");
        for b in &m.breakdowns {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                b.grouping,
                opt4(b.dp),
                opt4(b.eo),
                b.per_group.len(),
                list_or_none(&b.excluded_groups)
            );
        }
        s
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Markdown => self.to_markdown(),
        }
    }
}

fn group_table(s: &mut String, groups: &BTreeMap<String, GroupRate<f64>>) {
    let _ = writeln!(s, "| Group | n | Correct | Rate |\n|---|---|---|---|");
    for (g, r) in groups {
        let _ = writeln!(s, "| {g} | {} | {} | {:.4} |", r.n, r.correct, r.rate);
    }
}

fn list_or_none(v: &[String]) -> String {
    if v.is_empty() {
        "none".into()
    } else {
        v.join(", ")
    }
}

fn opt_raw(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn opt2(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.2}"))
}

fn opt4(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

/// Mean-pairwise (or global) overlap per item, from the audit log.
pub fn per_item_overlap(config: &ExperimentConfig, audit: &[AuditEntry]) -> Vec<Option<f64>> {
    let mut by_item: Vec<(&str, Vec<BTreeSet<&str>>)> = Vec::new();
    for a in audit {
        let set: BTreeSet<&str> = a.retrieved.iter().map(String::as_str).collect();
        match by_item.last_mut() {
            Some((id, sets)) if *id == a.item_id => sets.push(set),
            _ => by_item.push((&a.item_id, vec![set])),
        }
    }
    by_item.iter().map(|(_, sets)| overlap_of_sets(sets, config.overlap_mode)).collect()
}

pub fn build_run_report(
    config: &ExperimentConfig,
    fingerprint: &str,
    items: usize,
    failed_items: usize,
    records: &[PredictionRecord],
    audit: &[AuditEntry],
) -> Result<RunReport, RunError> {
    let inputs = ReportInputs {
        grouping: config.grouping,
        known_groups: known_groups(config),
        per_item_overlap: per_item_overlap(config, audit),
        overlap_mode: config.overlap_mode,
        tau_r: config.tau_r,
    };
    let metrics = compute_report(records, &inputs).map_err(|e| RunError::Invalid(e.to_string()))?;
    Ok(RunReport {
        name: config.name.clone(),
        fingerprint: fingerprint.to_string(),
        dataset: super::dataset::dataset_name(&config.dataset),
        model: config.model_label(),
        strategy: config.strategy,
        majority_vote: config.majority_vote,
        retriever: config.retrieval.retriever_label(),
        k: config.retrieval.k,
        seed: config.seed,
        items,
        failed_items,
        max_items: config.max_items,
        tau_c: config.tau_c,
        answer_parsing: PARSE_LADDER.to_string(),
        metrics,
    })
}

pub fn write_reports(run_dir: &Path, report: &RunReport) -> Result<(), RunError> {
    write_file(&run_dir.join(REPORT_JSON), &report.to_json())?;
    write_file(&run_dir.join(REPORT_CSV), &report.to_csv())?;
    write_file(&run_dir.join(REPORT_MD), &report.to_markdown())
}

pub fn load_report(run_dir: &Path) -> Result<RunReport, RunError> {
    let path = run_dir.join(REPORT_JSON);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| RunError::Invalid(format!("{}: {e}", path.display())))
}

/// Rebuild the report from `config.json`, `records.jsonl`, `audit.jsonl` and
/// `errors.jsonl` alone.
pub fn recompute_report(run_dir: &Path) -> Result<RunReport, RunError> {
    let cfg_path = run_dir.join(CONFIG_FILE);
    let cfg_text = std::fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let config: ExperimentConfig =
        serde_json::from_str(&cfg_text).map_err(|e| RunError::Invalid(format!("{}: {e}", cfg_path.display())))?;
    let records: Vec<PredictionRecord> = read_jsonl(&run_dir.join(RECORDS_FILE))?;
    let audit: Vec<AuditEntry> = read_jsonl(&run_dir.join(AUDIT_FILE))?;
    let errors: Vec<ItemError> = read_jsonl(&run_dir.join(ERRORS_FILE))?;
    let ok_items: BTreeSet<&str> = audit.iter().map(|a| a.item_id.as_str()).collect();
    // The fingerprint covers template files that are not copied into the run.
    let fingerprint = load_report(run_dir).map(|r| r.fingerprint).unwrap_or_default();
    build_run_report(&config, &fingerprint, ok_items.len() + errors.len(), errors.len(), &records, &audit)
}

/// Side-by-side headline metrics of two runs, as markdown.
pub fn compare_reports(a: &RunReport, b: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| Metric | A | B | B − A |\n|---|---|---|---|");
    let rows = [
        ("Score", a.score(), b.score()),
        ("Retrieval overlap", a.metrics.retrieval_overlap, b.metrics.retrieval_overlap),
        ("DP", a.metrics.dp, b.metrics.dp),
        ("EO", a.metrics.eo, b.metrics.eo),
        ("Tie rate", a.metrics.tie_rate, b.metrics.tie_rate),
        (
            "CF inconsistency",
            a.metrics.counterfactual_inconsistency_rate,
            b.metrics.counterfactual_inconsistency_rate,
        ),
    ];
    for (name, x, y) in rows {
        let delta = x.zip(y).map(|(x, y)| y - x);
        let _ = writeln!(s, "| {name} | {} | {} | {} |", opt4(x), opt4(y), opt4(delta));
    }
    let _ = writeln!(
        s,
        "\nA: `{}` ({}, mv {})  \nB: `{}` ({}, mv {})",
        a.fingerprint, a.strategy, a.majority_vote, b.fingerprint, b.strategy, b.majority_vote
    );
    s
}
