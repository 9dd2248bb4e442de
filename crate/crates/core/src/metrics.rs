//! Accuracy, ROUGE-L, retrieval overlap and group-fairness disparities over
//! per-item prediction records.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::FilterStrategy;
use crate::retrieval::RankedList;
use crate::scalar::Scalar;
use crate::tokenize::tokenize;
use crate::variants::{variant_key, Assignment, Axis};

pub const DEFAULT_ROUGE_THRESHOLD: f64 = 0.4;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no records")]
    EmptyRecordSet,
    #[error("no record belongs to any group under grouping `{0}`")]
    NoGroups(String),
    #[error("no answerable records under grouping `{0}`")]
    NoAnswerableRecords(String),
}

/// One scored prediction. Before aggregation there is one per item and
/// variant; after a majority vote there is one per item, and `vote_groups`
/// lists every variant group whose answer the consensus replaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub item_id: String,
    pub variant_key: String,
    pub group: Assignment,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vote_groups: Vec<Assignment>,
    pub y_hat: u8,
    pub answerable: u8,
    pub strategy: FilterStrategy,
    pub dataset: String,
    /// Final answer: option letter or free text; absent when nothing parsed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tie: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterfactual_consistent: Option<bool>,
}

impl PredictionRecord {
    /// Groups this record counts toward.
    pub fn memberships(&self) -> &[Assignment] {
        if self.vote_groups.is_empty() {
            std::slice::from_ref(&self.group)
        } else {
            &self.vote_groups
        }
    }

    pub fn correct(&self) -> bool {
        self.y_hat == 1
    }

    pub fn is_answerable(&self) -> bool {
        self.answerable == 1
    }
}

/// What "group" means when comparing rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    Race,
    Gender,
    /// The full assignment, i.e. the variant key.
    Combined,
}

impl Grouping {
    pub const ALL: [Grouping; 3] = [Grouping::Race, Grouping::Gender, Grouping::Combined];

    pub fn as_str(self) -> &'static str {
        match self {
            Grouping::Race => "race",
            Grouping::Gender => "gender",
            Grouping::Combined => "combined",
        }
    }

    /// The group label of `assignment`, if it has one under this grouping.
    pub fn key(self, assignment: &Assignment) -> Option<String> {
        match self {
            Grouping::Race => assignment.get(&Axis::Race).cloned(),
            Grouping::Gender => assignment.get(&Axis::Gender).cloned(),
            Grouping::Combined => Some(variant_key(assignment)),
        }
    }

    /// Distinct group labels of a record.
    pub fn record_keys(self, record: &PredictionRecord) -> BTreeSet<String> {
        record.memberships().iter().filter_map(|a| self.key(a)).collect()
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Grouping {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Grouping::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| format!("unknown grouping `{s}` (race, gender, combined)"))
    }
}

/// 100 × mean(y_hat).
pub fn accuracy<S: Scalar>(records: &[PredictionRecord]) -> Result<S, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecordSet);
    }
    let correct = records.iter().filter(|r| r.correct()).count();
    Ok(S::from_usize_lossy(100 * correct) / S::from_usize_lossy(records.len()))
}

/// Length of the longest common subsequence, in O(|b|) memory.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Token-level ROUGE-L F1 on pre-tokenized input.
pub fn rouge_l_tokens<S: Scalar, T: PartialEq>(candidate: &[T], reference: &[T]) -> S {
    if candidate.is_empty() || reference.is_empty() {
        return S::zero();
    }
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return S::zero();
    }
    let l = S::from_usize_lossy(l);
    let p = l / S::from_usize_lossy(candidate.len());
    let r = l / S::from_usize_lossy(reference.len());
    (S::one() + S::one()) * p * r / (p + r)
}

/// ROUGE-L F1 with the corpus tokenizer.
pub fn rouge_l<S: Scalar>(candidate: &str, reference: &str) -> S {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

/// Correctness bit for an open-ended answer: 1 iff `score >= tau_r`.
pub fn binarize_open_answer<S: Scalar>(score: S, tau_r: S) -> u8 {
    u8::from(score >= tau_r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapMode {
    /// Mean IoU over all unordered variant pairs.
    #[default]
    Pairwise,
    /// |∩ all| / |∪ all| across every variant at once.
    Global,
}

fn iou<S: Scalar>(a: &BTreeSet<&str>, b: &BTreeSet<&str>) -> S {
    let union = a.union(b).count();
    if union == 0 {
        return S::one();
    }
    S::from_usize_lossy(a.intersection(b).count()) / S::from_usize_lossy(union)
}

/// Overlap of retrieved snippet IDs across one item's variants, as a
/// percentage. `None` with fewer than two variants.
pub fn retrieval_overlap<S: Scalar>(lists: &BTreeMap<String, RankedList<S>>, mode: OverlapMode) -> Option<S> {
    let sets: Vec<BTreeSet<&str>> = lists.values().map(|l| l.ids().collect()).collect();
    overlap_of_sets(&sets, mode)
}

pub fn overlap_of_sets<S: Scalar>(sets: &[BTreeSet<&str>], mode: OverlapMode) -> Option<S> {
    if sets.len() < 2 {
        return None;
    }
    let value = match mode {
        OverlapMode::Pairwise => {
            let mut sum = S::zero();
            let mut pairs = 0usize;
            for i in 0..sets.len() {
                for j in (i + 1)..sets.len() {
                    sum += iou::<S>(&sets[i], &sets[j]);
                    pairs += 1;
                }
            }
            sum / S::from_usize_lossy(pairs)
        }
        OverlapMode::Global => {
            let union: BTreeSet<&str> = sets.iter().flatten().copied().collect();
            if union.is_empty() {
                S::one()
            } else {
                let inter = union.iter().filter(|id| sets.iter().all(|s| s.contains(*id))).count();
                S::from_usize_lossy(inter) / S::from_usize_lossy(union.len())
            }
        }
    };
    Some(S::hundred() * value)
}

/// Mean of the per-item overlaps that are defined.
pub fn mean_overlap<S: Scalar>(per_item: impl IntoIterator<Item = Option<S>>) -> Option<S> {
    let vals: Vec<S> = per_item.into_iter().flatten().collect();
    if vals.is_empty() {
        return None;
    }
    let n = S::from_usize_lossy(vals.len());
    Some(vals.into_iter().sum::<S>() / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct GroupRate<S = f64> {
    pub n: usize,
    pub correct: usize,
    pub rate: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Disparity<S = f64> {
    pub value: S,
    pub per_group: BTreeMap<String, GroupRate<S>>,
    /// Groups with a zero denominator, left out of `value`.
    pub excluded: Vec<String>,
}

fn disparity<S: Scalar>(
    records: &[PredictionRecord],
    grouping: Grouping,
    known_groups: &BTreeSet<String>,
    answerable_only: bool,
) -> Result<Disparity<S>, MetricsError> {
    let mut counts: BTreeMap<String, (usize, usize)> = known_groups.iter().map(|g| (g.clone(), (0, 0))).collect();
    let mut any_answerable = false;
    for r in records {
        let keys = grouping.record_keys(r);
        let counted = !answerable_only || r.is_answerable();
        any_answerable |= counted && !keys.is_empty();
        for k in keys {
            let slot = counts.entry(k).or_default();
            if counted {
                slot.0 += 1;
                slot.1 += usize::from(r.correct());
            }
        }
    }
    if counts.is_empty() {
        return Err(MetricsError::NoGroups(grouping.to_string()));
    }
    if answerable_only && !any_answerable {
        return Err(MetricsError::NoAnswerableRecords(grouping.to_string()));
    }
    let mut per_group = BTreeMap::new();
    let mut excluded = Vec::new();
    for (g, (n, correct)) in counts {
        if n == 0 {
            excluded.push(g);
            continue;
        }
        let rate = S::from_usize_lossy(correct) / S::from_usize_lossy(n);
        per_group.insert(g, GroupRate { n, correct, rate });
    }
    if per_group.is_empty() {
        return Err(MetricsError::NoGroups(grouping.to_string()));
    }
    // Rounding is monotone, so max - min is the largest pairwise |difference|.
    let max = per_group.values().map(|g| g.rate).fold(S::neg_infinity(), S::max);
    let min = per_group.values().map(|g| g.rate).fold(S::infinity(), S::min);
    Ok(Disparity {
        value: (max - min).abs(),
        per_group,
        excluded,
    })
}

/// max over group pairs of |P(Ŷ=1 | G=g) − P(Ŷ=1 | G=g′)|. `known_groups`
/// lists groups expected even if no record carries them; they are reported
/// as excluded.
pub fn dp_disparity<S: Scalar>(
    records: &[PredictionRecord],
    grouping: Grouping,
    known_groups: &BTreeSet<String>,
) -> Result<Disparity<S>, MetricsError> {
    disparity(records, grouping, known_groups, false)
}

/// As [`dp_disparity`], restricted to answerable records (Y = 1).
pub fn eo_disparity<S: Scalar>(
    records: &[PredictionRecord],
    grouping: Grouping,
    known_groups: &BTreeSet<String>,
) -> Result<Disparity<S>, MetricsError> {
    disparity(records, grouping, known_groups, true)
}

/// Fairness numbers under one grouping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct FairnessBreakdown<S = f64> {
    pub grouping: Grouping,
    pub dp: Option<S>,
    pub eo: Option<S>,
    pub per_group: BTreeMap<String, GroupRate<S>>,
    pub eo_per_group: BTreeMap<String, GroupRate<S>>,
    pub excluded_groups: Vec<String>,
}

pub fn fairness_breakdown<S: Scalar>(
    records: &[PredictionRecord],
    grouping: Grouping,
    known_groups: &BTreeSet<String>,
) -> FairnessBreakdown<S> {
    let dp = dp_disparity::<S>(records, grouping, known_groups).ok();
    let eo = eo_disparity::<S>(records, grouping, known_groups).ok();
    let mut excluded: BTreeSet<String> = BTreeSet::new();
    for d in [&dp, &eo].into_iter().flatten() {
        excluded.extend(d.excluded.iter().cloned());
    }
    FairnessBreakdown {
        grouping,
        dp: dp.as_ref().map(|d| d.value),
        eo: eo.as_ref().map(|d| d.value),
        per_group: dp.map(|d| d.per_group).unwrap_or_default(),
        eo_per_group: eo.map(|d| d.per_group).unwrap_or_default(),
        excluded_groups: excluded.into_iter().collect(),
    }
}

/// Headline numbers for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct MetricsReport<S = f64> {
    pub records: usize,
    /// Percent correct over closed-form records.
    pub accuracy: Option<S>,
    /// Mean ROUGE-L over open-ended records, as a percentage.
    pub mean_rouge_l: Option<S>,
    pub retrieval_overlap: Option<S>,
    pub overlap_mode: OverlapMode,
    /// Grouping behind `dp`, `eo`, `per_group` and `excluded_groups`.
    pub grouping: Grouping,
    pub dp: Option<S>,
    pub eo: Option<S>,
    pub per_group: BTreeMap<String, GroupRate<S>>,
    pub excluded_groups: Vec<String>,
    pub breakdowns: Vec<FairnessBreakdown<S>>,
    /// Share of majority votes decided by a tie-break.
    pub tie_rate: Option<S>,
    /// Share of counterfactual checks whose probes disagreed.
    pub counterfactual_inconsistency_rate: Option<S>,
    pub tau_r: S,
}

/// Everything [`compute_report`] needs besides the records.
#[derive(Debug, Clone)]
pub struct ReportInputs<S: Scalar = f64> {
    pub grouping: Grouping,
    pub known_groups: BTreeMap<Grouping, BTreeSet<String>>,
    pub per_item_overlap: Vec<Option<S>>,
    pub overlap_mode: OverlapMode,
    pub tau_r: S,
}

fn share<S: Scalar>(flags: impl Iterator<Item = bool>) -> Option<S> {
    let (mut n, mut hit) = (0usize, 0usize);
    for f in flags {
        n += 1;
        hit += usize::from(f);
    }
    (n > 0).then(|| S::from_usize_lossy(hit) / S::from_usize_lossy(n))
}

pub fn compute_report<S: Scalar>(records: &[PredictionRecord], inputs: &ReportInputs<S>) -> Result<MetricsReport<S>, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecordSet);
    }
    let closed: Vec<PredictionRecord> = records.iter().filter(|r| r.rouge_l.is_none()).cloned().collect();
    let rouge: Vec<S> = records.iter().filter_map(|r| r.rouge_l).map(S::from_f64_lossy).collect();
    let mean_rouge_l = (!rouge.is_empty()).then(|| S::hundred() * rouge.iter().copied().sum::<S>() / S::from_usize_lossy(rouge.len()));
    let empty = BTreeSet::new();
    let breakdowns: Vec<FairnessBreakdown<S>> = Grouping::ALL
        .into_iter()
        .map(|g| fairness_breakdown(records, g, inputs.known_groups.get(&g).unwrap_or(&empty)))
        .collect();
    let primary = breakdowns
        .iter()
        .find(|b| b.grouping == inputs.grouping)
        .expect("all groupings computed")
        .clone();
    Ok(MetricsReport {
        records: records.len(),
        accuracy: accuracy(&closed).ok(),
        mean_rouge_l,
        retrieval_overlap: mean_overlap(inputs.per_item_overlap.iter().copied()),
        overlap_mode: inputs.overlap_mode,
        grouping: inputs.grouping,
        dp: primary.dp,
        eo: primary.eo,
        per_group: primary.per_group,
        excluded_groups: primary.excluded_groups,
        breakdowns,
        tie_rate: share(records.iter().filter_map(|r| r.tie)),
        counterfactual_inconsistency_rate: share(records.iter().filter_map(|r| r.counterfactual_consistent.map(|c| !c))),
        tau_r: inputs.tau_r,
    })
}
