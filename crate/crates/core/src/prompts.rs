//! Prompt construction for the four filtering strategies.
//!
//! Wording lives in template files (`templates/*.txt`) with the slots
//! `{{evidence}}`, `{{question}}`, `{{options}}` and `{{answer_format}}`.
//! The built-in set is compiled in; a directory with the same four files
//! overrides it.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::tally;
use crate::corpus::SnippetStore;
use crate::generation::ParsedAnswer;
use crate::retrieval::RankedList;
use crate::scalar::Scalar;
use crate::variants::{realize_text, variant_key, Assignment, Neutralizer, QueryVariant};

pub const NO_EVIDENCE: &str = "No evidence retrieved.";
pub const CLOSED_ANSWER_FORMAT: &str = "Answer with a single option letter.";
pub const OPEN_ANSWER_FORMAT: &str = "Answer in a few sentences.";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("evidence snippet `{0}` is not in the store")]
    MissingSnippet(String),
    #[error("counterfactual probing needs at least one alternate assignment distinct from the original")]
    InvalidAlternates,
    #[error("consistency check needs at least two answers, got {0}")]
    TooFewAnswers(usize),
    #[error("no parseable answer among counterfactual probes")]
    AllUnparseable,
    #[error("template io: {0}")]
    Io(String),
    #[error("template `{0}` lacks the {{{{question}}}} slot")]
    MissingSlot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterStrategy {
    Plain,
    Cot,
    Counterfactual,
    Adversarial,
}

impl FilterStrategy {
    pub const ALL: [FilterStrategy; 4] = [
        FilterStrategy::Plain,
        FilterStrategy::Cot,
        FilterStrategy::Counterfactual,
        FilterStrategy::Adversarial,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FilterStrategy::Plain => "plain",
            FilterStrategy::Cot => "cot",
            FilterStrategy::Counterfactual => "counterfactual",
            FilterStrategy::Adversarial => "adversarial",
        }
    }
}

impl fmt::Display for FilterStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FilterStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FilterStrategy::ALL
            .into_iter()
            .find(|f| f.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub version: String,
    pub plain: String,
    pub cot: String,
    pub counterfactual: String,
    pub adversarial: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            version: include_str!("../templates/VERSION").trim().to_string(),
            plain: include_str!("../templates/plain.txt").to_string(),
            cot: include_str!("../templates/cot.txt").to_string(),
            counterfactual: include_str!("../templates/counterfactual.txt").to_string(),
            adversarial: include_str!("../templates/adversarial.txt").to_string(),
        }
    }
}

impl TemplateSet {
    /// Reads `plain.txt`, `cot.txt`, `counterfactual.txt`, `adversarial.txt`
    /// and an optional `VERSION` file from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let read =
            |name: &str| fs::read_to_string(dir.join(name)).map_err(|e| PromptError::Io(format!("{}: {e}", dir.join(name).display())));
        let set = TemplateSet {
            version: read("VERSION").map(|v| v.trim().to_string()).unwrap_or_else(|_| "custom".into()),
            plain: read("plain.txt")?,
            cot: read("cot.txt")?,
            counterfactual: read("counterfactual.txt")?,
            adversarial: read("adversarial.txt")?,
        };
        for s in FilterStrategy::ALL {
            if !set.get(s).contains("{{question}}") {
                return Err(PromptError::MissingSlot(s.to_string()));
            }
        }
        Ok(set)
    }

    pub fn get(&self, strategy: FilterStrategy) -> &str {
        match strategy {
            FilterStrategy::Plain => &self.plain,
            FilterStrategy::Cot => &self.cot,
            FilterStrategy::Counterfactual => &self.counterfactual,
            FilterStrategy::Adversarial => &self.adversarial,
        }
    }
}

/// Prompts for one variant under one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub strategy: FilterStrategy,
    pub prompts: Vec<String>,
    /// Counterfactual only: the assignment each prompt was realized with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_assignments: Option<Vec<Assignment>>,
    /// Demographic group the bundle is attributed to for metrics.
    pub group: Assignment,
}

impl PromptBundle {
    pub fn check(&self) -> Result<(), String> {
        match (self.strategy, &self.probe_assignments) {
            (FilterStrategy::Counterfactual, Some(probes)) if self.prompts.len() >= 2 && probes.len() == self.prompts.len() => Ok(()),
            (FilterStrategy::Counterfactual, _) => Err("counterfactual bundle needs >= 2 aligned prompts".into()),
            (_, None) if self.prompts.len() == 1 => Ok(()),
            _ => Err(format!("{} bundle must hold exactly one prompt", self.strategy)),
        }
    }
}

/// Builds prompt bundles. Pure and deterministic for fixed templates.
pub struct PromptBuilder {
    templates: TemplateSet,
    neutralizer: Neutralizer,
}

impl PromptBuilder {
    pub fn new(templates: TemplateSet, neutralizer: Neutralizer) -> Self {
        PromptBuilder { templates, neutralizer }
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn build_plain<S: Scalar>(
        &self,
        variant: &QueryVariant,
        evidence: &RankedList<S>,
        store: &SnippetStore,
        options: Option<&BTreeMap<char, String>>,
    ) -> Result<PromptBundle, PromptError> {
        self.single(FilterStrategy::Plain, variant, &variant.realized_text, evidence, store, options)
    }

    pub fn build_cot<S: Scalar>(
        &self,
        variant: &QueryVariant,
        evidence: &RankedList<S>,
        store: &SnippetStore,
        options: Option<&BTreeMap<char, String>>,
    ) -> Result<PromptBundle, PromptError> {
        self.single(FilterStrategy::Cot, variant, &variant.realized_text, evidence, store, options)
    }

    /// Demographic cues in the question become "the patient"; the bundle
    /// still carries the variant's own group.
    pub fn build_adversarial<S: Scalar>(
        &self,
        variant: &QueryVariant,
        evidence: &RankedList<S>,
        store: &SnippetStore,
        options: Option<&BTreeMap<char, String>>,
    ) -> Result<PromptBundle, PromptError> {
        let question = self.neutralizer.neutralize(&variant.realized_text);
        self.single(FilterStrategy::Adversarial, variant, &question, evidence, store, options)
    }

    /// One prompt for the variant's own assignment followed by one per
    /// alternate, all sharing the same evidence.
    pub fn build_counterfactual<S: Scalar>(
        &self,
        variant: &QueryVariant,
        evidence: &RankedList<S>,
        store: &SnippetStore,
        options: Option<&BTreeMap<char, String>>,
        alternates: &[Assignment],
    ) -> Result<PromptBundle, PromptError> {
        let mut probes = vec![variant.assignment.clone()];
        for alt in alternates {
            if probes.contains(alt) {
                return Err(PromptError::InvalidAlternates);
            }
            probes.push(alt.clone());
        }
        if probes.len() < 2 {
            return Err(PromptError::InvalidAlternates);
        }
        let evidence_block = render_evidence(evidence, store)?;
        let template = self.templates.get(FilterStrategy::Counterfactual);
        let prompts = probes
            .iter()
            .map(|a| {
                let question = if *a == variant.assignment {
                    variant.realized_text.clone()
                } else {
                    realize_text(&variant.base_text, a)
                };
                render(template, &evidence_block, &question, options)
            })
            .collect();
        Ok(PromptBundle {
            strategy: FilterStrategy::Counterfactual,
            prompts,
            probe_assignments: Some(probes),
            group: variant.assignment.clone(),
        })
    }

    pub fn build<S: Scalar>(
        &self,
        strategy: FilterStrategy,
        variant: &QueryVariant,
        evidence: &RankedList<S>,
        store: &SnippetStore,
        options: Option<&BTreeMap<char, String>>,
        alternates: &[Assignment],
    ) -> Result<PromptBundle, PromptError> {
        match strategy {
            FilterStrategy::Plain => self.build_plain(variant, evidence, store, options),
            FilterStrategy::Cot => self.build_cot(variant, evidence, store, options),
            FilterStrategy::Adversarial => self.build_adversarial(variant, evidence, store, options),
            FilterStrategy::Counterfactual => self.build_counterfactual(variant, evidence, store, options, alternates),
        }
    }

    fn single<S: Scalar>(
        &self,
        strategy: FilterStrategy,
        variant: &QueryVariant,
        question: &str,
        evidence: &RankedList<S>,
        store: &SnippetStore,
        options: Option<&BTreeMap<char, String>>,
    ) -> Result<PromptBundle, PromptError> {
        let evidence_block = render_evidence(evidence, store)?;
        Ok(PromptBundle {
            strategy,
            prompts: vec![render(self.templates.get(strategy), &evidence_block, question, options)],
            probe_assignments: None,
            group: variant.assignment.clone(),
        })
    }
}

/// Snippets numbered `[1]..[n]` in ranking order.
pub fn render_evidence<S: Scalar>(evidence: &RankedList<S>, store: &SnippetStore) -> Result<String, PromptError> {
    if evidence.is_empty() {
        return Ok(NO_EVIDENCE.to_string());
    }
    let mut lines = Vec::with_capacity(evidence.len());
    for (i, id) in evidence.ids().enumerate() {
        let snippet = store.get(id).ok_or_else(|| PromptError::MissingSnippet(id.to_string()))?;
        lines.push(format!("[{}] ({}) {}", i + 1, snippet.id, snippet.text));
    }
    Ok(lines.join("\n"))
}

pub fn render_options(options: Option<&BTreeMap<char, String>>) -> String {
    match options {
        Some(opts) if !opts.is_empty() => {
            let body = opts.iter().map(|(l, t)| format!("{l}. {t}")).collect::<Vec<_>>().join("\n");
            format!("Options:\n{body}\n")
        }
        _ => String::new(),
    }
}

fn render(template: &str, evidence: &str, question: &str, options: Option<&BTreeMap<char, String>>) -> String {
    let answer_format = if options.is_some() {
        CLOSED_ANSWER_FORMAT
    } else {
        OPEN_ANSWER_FORMAT
    };
    template
        .replace("{{evidence}}", evidence)
        .replace("{{options}}", &render_options(options))
        .replace("{{answer_format}}", answer_format)
        .replace("{{question}}", question)
        .trim_end()
        .to_string()
}

/// Probe assignments for counterfactual filtering: every single-axis change
/// of the variant's assignment. The unassigned base question is probed with
/// each configured race value (or gender, when no races are configured).
pub fn counterfactual_alternates(assignment: &Assignment, config: &crate::variants::DemographicConfig) -> Vec<Assignment> {
    use crate::variants::Axis;
    if assignment.is_empty() {
        let axis = if config.race.is_empty() { Axis::Gender } else { Axis::Race };
        return config.values(axis).iter().map(|v| Assignment::from([(axis, v.clone())])).collect();
    }
    let mut out = Vec::new();
    for (axis, current) in assignment {
        for v in config.values(*axis) {
            if v != current {
                let mut alt = assignment.clone();
                alt.insert(*axis, v.clone());
                out.push(alt);
            }
        }
    }
    out
}

/// Unanimous answers → `(answer, true)`; otherwise the plurality answer
/// (ties to the lowest letter) with `false`.
pub fn check_counterfactual_consistency(answers: &[ParsedAnswer]) -> Result<(char, bool), PromptError> {
    if answers.len() < 2 {
        return Err(PromptError::TooFewAnswers(answers.len()));
    }
    let letters: Vec<char> = answers.iter().filter_map(ParsedAnswer::letter).collect();
    let t = tally(letters.iter().copied()).ok_or(PromptError::AllUnparseable)?;
    let unanimous = letters.len() == answers.len() && t.counts.len() == 1;
    Ok((t.winner, unanimous))
}

/// Variant key of each probe, for logging.
pub fn probe_keys(bundle: &PromptBundle) -> Vec<String> {
    bundle
        .probe_assignments
        .as_ref()
        .map(|p| p.iter().map(variant_key).collect())
        .unwrap_or_default()
}
