//! Demographic variants of a question: race and/or gender cues substituted
//! into the question stem.
//!
//! Templates may carry `{race}`, `{gender}` or `{demographic}` placeholders.
//! Without one, the clause `This <race> <gender> patient: ` is prefixed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::tokenize::tokenize;

#[derive(Debug, Error, PartialEq)]
pub enum VariantError {
    #[error("no values configured for axis {0}")]
    EmptyValueList(Axis),
    #[error("unknown axis `{0}`")]
    UnknownAxis(String),
    #[error("malformed variant key `{0}`")]
    BadVariantKey(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Race,
    Gender,
}

impl Axis {
    pub const ALL: [Axis; 2] = [Axis::Race, Axis::Gender];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Race => "race",
            Axis::Gender => "gender",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = VariantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "race" => Ok(Axis::Race),
            "gender" => Ok(Axis::Gender),
            _ => Err(VariantError::UnknownAxis(s.to_string())),
        }
    }
}

/// Axis → value. Empty means the unmodified base question.
pub type Assignment = BTreeMap<Axis, String>;

pub const BASE_KEY: &str = "base";

/// Canonical key, e.g. `race=Asian|gender=female`, or `base`.
pub fn variant_key(assignment: &Assignment) -> String {
    if assignment.is_empty() {
        return BASE_KEY.to_string();
    }
    assignment
        .iter()
        .map(|(axis, value)| format!("{axis}={value}"))
        .collect::<Vec<_>>()
        .join("|")
}

pub fn parse_variant_key(key: &str) -> Result<Assignment, VariantError> {
    if key == BASE_KEY {
        return Ok(Assignment::new());
    }
    let mut out = Assignment::new();
    for part in key.split('|') {
        let (axis, value) = part.split_once('=').ok_or_else(|| VariantError::BadVariantKey(key.to_string()))?;
        if value.is_empty() || out.insert(axis.parse()?, value.to_string()).is_some() {
            return Err(VariantError::BadVariantKey(key.to_string()));
        }
    }
    Ok(out)
}

fn default_race() -> Vec<String> {
    ["Caucasian", "African American", "Asian", "Hispanic"].map(String::from).to_vec()
}

fn default_gender() -> Vec<String> {
    ["male", "female", "non-binary"].map(String::from).to_vec()
}

fn default_axes() -> BTreeSet<Axis> {
    BTreeSet::from(Axis::ALL)
}

/// The `demographics:` section of an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemographicConfig {
    #[serde(default = "default_axes")]
    pub axes: BTreeSet<Axis>,
    #[serde(default = "default_race")]
    pub race: Vec<String>,
    #[serde(default = "default_gender")]
    pub gender: Vec<String>,
}

impl Default for DemographicConfig {
    fn default() -> Self {
        DemographicConfig {
            axes: default_axes(),
            race: default_race(),
            gender: default_gender(),
        }
    }
}

impl DemographicConfig {
    pub fn values(&self, axis: Axis) -> &[String] {
        match axis {
            Axis::Race => &self.race,
            Axis::Gender => &self.gender,
        }
    }

    /// Every configured attribute value across both axes.
    pub fn all_values(&self) -> impl Iterator<Item = &str> {
        self.race.iter().chain(self.gender.iter()).map(String::as_str)
    }

    /// All assignments over the requested axes, race-major.
    pub fn assignments(&self) -> Result<Vec<Assignment>, VariantError> {
        let mut out = vec![Assignment::new()];
        for &axis in &self.axes {
            let values = self.values(axis);
            if values.is_empty() {
                return Err(VariantError::EmptyValueList(axis));
            }
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    values.iter().map(move |v| {
                        let mut a = prefix.clone();
                        a.insert(axis, v.clone());
                        a
                    })
                })
                .collect();
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Insertion {
    /// Nothing was substituted (empty assignment).
    None,
    Placeholder,
    Prefix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryVariant {
    pub base_id: String,
    /// The item's question as written, placeholders included.
    pub base_text: String,
    pub assignment: Assignment,
    pub realized_text: String,
    pub variant_key: String,
    pub insertion: Insertion,
}

const PLACEHOLDERS: [&str; 3] = ["{race}", "{gender}", "{demographic}"];

pub fn has_placeholder(template: &str) -> bool {
    PLACEHOLDERS.iter().any(|p| template.contains(p))
}

/// Apply `assignment` to `template`; see the module docs for the rules.
pub fn realize_text(template: &str, assignment: &Assignment) -> String {
    realize_with_mode(template, assignment).0
}

pub fn realize_with_mode(template: &str, assignment: &Assignment) -> (String, Insertion) {
    if assignment.is_empty() {
        let mut text = template.to_string();
        if has_placeholder(&text) {
            for p in PLACEHOLDERS {
                text = text.replace(p, "");
            }
            text = collapse_spaces(&text);
        }
        return (text, Insertion::None);
    }
    let race = assignment.get(&Axis::Race).map(String::as_str);
    let gender = assignment.get(&Axis::Gender).map(String::as_str);
    let combined = [race, gender].into_iter().flatten().collect::<Vec<_>>().join(" ");

    if has_placeholder(template) {
        let text = template
            .replace("{demographic}", &combined)
            .replace("{race}", race.unwrap_or(""))
            .replace("{gender}", gender.unwrap_or(""));
        // An unassigned placeholder leaves a doubled space behind.
        (collapse_spaces(&text), Insertion::Placeholder)
    } else {
        (format!("This {combined} patient: {template}"), Insertion::Prefix)
    }
}

fn collapse_spaces(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if !(c == ' ' && out.ends_with(' ')) {
            out.push(c);
        }
    }
    out
}

/// Cartesian product over `config.axes` in race-major order; no axes gives
/// the base question alone.
pub fn generate_variants(base_id: &str, question: &str, config: &DemographicConfig) -> Result<Vec<QueryVariant>, VariantError> {
    let assignments = config.assignments()?;
    if !config.axes.is_empty() && !has_placeholder(question) {
        debug!(base_id, "no placeholder in question; using prefix injection");
    }
    Ok(assignments
        .into_iter()
        .map(|assignment| {
            let (realized_text, insertion) = realize_with_mode(question, &assignment);
            QueryVariant {
                base_id: base_id.to_string(),
                base_text: question.to_string(),
                variant_key: variant_key(&assignment),
                assignment,
                realized_text,
                insertion,
            }
        })
        .collect())
}

/// Replaces demographic cues with the neutral phrase "the patient".
///
/// A run of attribute values, optionally preceded by a determiner and
/// followed by a person noun ("This Hispanic female patient"), collapses to a
/// single "the patient". Matching is case-insensitive on whole words and
/// tolerant of the separator inside multi-word values.
pub struct Neutralizer {
    pattern: Option<Regex>,
}

pub const NEUTRAL_PHRASE: &str = "the patient";

impl Neutralizer {
    pub fn new<'a>(values: impl IntoIterator<Item = &'a str>) -> Self {
        let mut alts: Vec<String> = values
            .into_iter()
            .map(tokenize)
            .filter(|toks| !toks.is_empty())
            .map(|toks| toks.iter().map(|t| regex::escape(t)).collect::<Vec<_>>().join(r"[^\p{L}\p{N}]+"))
            .collect();
        if alts.is_empty() {
            return Neutralizer { pattern: None };
        }
        // Longest alternatives first so multi-word values win.
        alts.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        alts.dedup();
        let value = format!("(?:{})", alts.join("|"));
        let pattern = format!(r"\b(?:(?:this|a|an|the)\s+)?{value}(?:[\s,/]+{value})*(?:\s+(?:patient|individual|person))?\b");
        let regex = RegexBuilder::new(&pattern)
            .case_insensitive(true)
            .build()
            .expect("neutralizer pattern is valid");
        Neutralizer { pattern: Some(regex) }
    }

    pub fn from_config(config: &DemographicConfig) -> Self {
        Self::new(config.all_values())
    }

    pub fn neutralize(&self, text: &str) -> String {
        let Some(re) = &self.pattern else { return text.to_string() };
        re.replace_all(text, |caps: &regex::Captures<'_>| {
            let m = caps.get(0).expect("whole match");
            let at_sentence_start = text[..m.start()].trim_end().is_empty() || text[..m.start()].trim_end().ends_with(['.', '?', '!', ':']);
            if at_sentence_start && m.as_str().starts_with(char::is_uppercase) {
                "The patient".to_string()
            } else {
                NEUTRAL_PHRASE.to_string()
            }
        })
        .into_owned()
    }
}

/// True when some configured value occurs in `text` as a contiguous run of tokens.
pub fn contains_attribute_value<'a>(text: &str, values: impl IntoIterator<Item = &'a str>) -> bool {
    let toks = tokenize(text);
    values.into_iter().any(|v| {
        let needle = tokenize(v);
        !needle.is_empty() && toks.windows(needle.len()).any(|w| w == needle.as_slice())
    })
}
