use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatModel, Completion, ItemMeta};
use crate::http::HttpError;
use crate::variants::variant_key;

/// Text the mock gives for an open-ended item it gets wrong.
pub const MOCK_WRONG_OPEN: &str = "Insufficient information to decide.";

fn default_base_rate() -> f64 {
    0.7
}

/// Seeded stand-in for a model with group-dependent accuracy.
///
/// Keys of `per_group_correct_rate` are matched against the item's group in
/// this order: the full variant key (`race=Asian|gender=female`), then one
/// `axis=value` pair per axis in axis order, then the bare value. The first
/// hit wins; with none, `base_correct_rate` applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockModelSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_base_rate")]
    pub base_correct_rate: f64,
    #[serde(default)]
    pub per_group_correct_rate: BTreeMap<String, f64>,
}

impl Default for MockModelSpec {
    fn default() -> Self {
        MockModelSpec {
            seed: 0,
            base_correct_rate: default_base_rate(),
            per_group_correct_rate: BTreeMap::new(),
        }
    }
}

impl MockModelSpec {
    pub fn validate(&self) -> Result<(), String> {
        let bad = |r: f64| !(0.0..=1.0).contains(&r);
        if bad(self.base_correct_rate) {
            return Err(format!("base_correct_rate {} is outside [0, 1]", self.base_correct_rate));
        }
        if let Some((g, r)) = self.per_group_correct_rate.iter().find(|(_, r)| bad(**r)) {
            return Err(format!("correct rate {r} for group `{g}` is outside [0, 1]"));
        }
        Ok(())
    }

    pub fn rate_for(&self, item: &ItemMeta) -> f64 {
        let rates = &self.per_group_correct_rate;
        if let Some(r) = rates.get(&variant_key(&item.group)) {
            return *r;
        }
        for (axis, value) in &item.group {
            if let Some(r) = rates.get(&format!("{axis}={value}")) {
                return *r;
            }
        }
        for value in item.group.values() {
            if let Some(r) = rates.get(value) {
                return *r;
            }
        }
        self.base_correct_rate
    }

    /// Uniform draw in [0, 1) from sha256(seed, item id, variant key).
    pub fn draw(&self, item: &ItemMeta) -> f64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(item.item_id.as_bytes());
        h.update([0x1f]);
        h.update(item.variant_key.as_bytes());
        let digest = h.finalize();
        let x = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        (x >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn is_correct(&self, item: &ItemMeta) -> bool {
        self.draw(item) < self.rate_for(item)
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockModel {
    pub spec: MockModelSpec,
}

impl MockModel {
    pub fn new(spec: MockModelSpec) -> Self {
        MockModel { spec }
    }

    /// Gold answer when the seeded draw says so; otherwise the next option
    /// letter cyclically (closed) or a fixed non-answer (open).
    pub fn answer_text(&self, item: &ItemMeta) -> String {
        let correct = self.spec.is_correct(item);
        match &item.options {
            Some(opts) => {
                let gold = item.gold.chars().next().unwrap_or('A');
                let letter = if correct {
                    gold
                } else {
                    let keys: Vec<char> = opts.keys().copied().collect();
                    let i = keys.iter().position(|&k| k == gold).unwrap_or(0);
                    keys[(i + 1) % keys.len()]
                };
                format!("Final Answer: {letter}")
            }
            None if correct => format!("Final Answer: {}", item.gold),
            None => format!("Final Answer: {MOCK_WRONG_OPEN}"),
        }
    }
}

impl ChatModel for MockModel {
    fn id(&self) -> String {
        format!("mock:{}", self.spec.seed)
    }

    fn complete(&self, _prompt: &str, item: &ItemMeta) -> Result<Completion, HttpError> {
        Ok(Completion {
            raw_text: self.answer_text(item),
            latency: Duration::ZERO,
            attempt_count: 1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::{generate, ParsedAnswer};
    use crate::variants::{Assignment, Axis};

    fn item(id: &str, race: &str) -> ItemMeta {
        let group = Assignment::from([(Axis::Race, race.to_string())]);
        ItemMeta {
            item_id: id.into(),
            variant_key: variant_key(&group),
            group,
            options: Some(('A'..='D').map(|l| (l, format!("opt {l}"))).collect()),
            gold: "D".into(),
        }
    }

    fn spec(base: f64, groups: &[(&str, f64)]) -> MockModelSpec {
        MockModelSpec {
            seed: 7,
            base_correct_rate: base,
            per_group_correct_rate: groups.iter().map(|(g, r)| (g.to_string(), *r)).collect(),
        }
    }

    #[test]
    fn deterministic() {
        let m = MockModel::new(spec(0.5, &[]));
        let a = generate(&m, "p", &item("q1", "Asian")).unwrap();
        let b = generate(&m, "p", &item("q1", "Asian")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn boundary_rates() {
        let always = MockModel::new(spec(0.0, &[("Asian", 1.0)]));
        let never = MockModel::new(spec(0.0, &[]));
        for i in 0..50 {
            let it = item(&format!("q{i}"), "Asian");
            assert_eq!(generate(&always, "p", &it).unwrap().parsed, ParsedAnswer::Letter('D'));
            // Gold D wraps around to A.
            assert_eq!(generate(&never, "p", &it).unwrap().parsed, ParsedAnswer::Letter('A'));
        }
    }

    #[test]
    fn half_rate_is_about_half() {
        let m = MockModel::new(spec(0.5, &[]));
        let correct = (0..200).filter(|i| m.spec.is_correct(&item(&format!("item-{i}"), "Asian"))).count();
        let frac = correct as f64 / 200.0;
        assert!((frac - 0.5).abs() <= 0.08, "{frac}");
    }

    #[test]
    fn rate_lookup_precedence() {
        let s = spec(0.3, &[("race=Asian", 0.9), ("Asian", 0.1), ("Hispanic", 0.2)]);
        assert_eq!(s.rate_for(&item("q", "Asian")), 0.9);
        assert_eq!(s.rate_for(&item("q", "Hispanic")), 0.2);
        assert_eq!(s.rate_for(&item("q", "Caucasian")), 0.3);
        assert!(spec(1.5, &[]).validate().is_err());
        assert!(spec(0.5, &[("x", -0.1)]).validate().is_err());
    }

    #[test]
    fn open_items() {
        let mut it = item("q", "Asian");
        it.options = None;
        it.gold = "Rest and fluids.".into();
        let good = MockModel::new(spec(1.0, &[]));
        let bad = MockModel::new(spec(0.0, &[]));
        assert_eq!(
            generate(&good, "p", &it).unwrap().parsed,
            ParsedAnswer::FreeText("Rest and fluids.".into())
        );
        assert_eq!(
            generate(&bad, "p", &it).unwrap().parsed,
            ParsedAnswer::FreeText(MOCK_WRONG_OPEN.into())
        );
    }
}
