use std::collections::{BTreeMap, BTreeSet};

use equirag::generation::{parse_mcq_answer, ItemMeta};
use equirag::metrics::{accuracy, dp_disparity, eo_disparity, overlap_of_sets, rouge_l, Grouping, OverlapMode};
use equirag::variants::{contains_attribute_value, generate_variants, parse_variant_key, Axis, DemographicConfig, Neutralizer};
use equirag::{ChatModel, FilterStrategy, MockModel, MockModelSpec, ParsedAnswer, PredictionRecord};
use proptest::prelude::*;

fn options() -> BTreeMap<char, String> {
    [
        ('A', "Metformin"),
        ('B', "Insulin glargine"),
        ('C', "Glipizide"),
        ('D', "Pioglitazone"),
    ]
    .into_iter()
    .map(|(k, v)| (k, v.to_string()))
    .collect()
}

fn record(group: &str, y_hat: u8, answerable: u8) -> PredictionRecord {
    PredictionRecord {
        item_id: "i".into(),
        variant_key: format!("race={group}"),
        group: [(Axis::Race, group.to_string())].into(),
        vote_groups: Vec::new(),
        y_hat,
        answerable,
        strategy: FilterStrategy::Plain,
        dataset: "d".into(),
        answer: None,
        rouge_l: None,
        tie: None,
        counterfactual_consistent: None,
    }
}

fn records() -> impl Strategy<Value = Vec<PredictionRecord>> {
    prop::collection::vec((prop::sample::select(vec!["g1", "g2", "g3", "g4"]), 0u8..2, 0u8..2), 1..80)
        .prop_map(|rs| rs.into_iter().map(|(g, y, a)| record(g, y, a)).collect())
}

fn relabel(rs: &[PredictionRecord]) -> Vec<PredictionRecord> {
    rs.iter()
        .map(|r| {
            let g = format!("renamed-{}", r.group[&Axis::Race]);
            record(&g, r.y_hat, r.answerable)
        })
        .collect()
}

proptest! {
    #[test]
    fn disparities_are_bounded_and_label_free(rs in records(), seed in any::<u64>()) {
        let none = BTreeSet::new();
        let dp = dp_disparity::<f64>(&rs, Grouping::Race, &none).unwrap();
        prop_assert!((0.0..=1.0).contains(&dp.value));
        let renamed = dp_disparity::<f64>(&relabel(&rs), Grouping::Race, &none).unwrap();
        prop_assert_eq!(dp.value, renamed.value);

        let mut shuffled = rs.clone();
        let n = shuffled.len();
        for i in 0..n {
            shuffled.swap(i, (seed as usize).wrapping_add(i * 7) % n);
        }
        prop_assert_eq!(dp_disparity::<f64>(&shuffled, Grouping::Race, &none).unwrap(), dp);
        if let Ok(eo) = eo_disparity::<f64>(&rs, Grouping::Race, &none) {
            prop_assert!((0.0..=1.0).contains(&eo.value));
        }
        let acc: f64 = accuracy(&rs).unwrap();
        prop_assert!((0.0..=100.0).contains(&acc));
    }

    #[test]
    fn known_but_absent_groups_are_excluded(rs in records()) {
        let known: BTreeSet<String> = ["g1", "g2", "g3", "g4", "g5"].map(String::from).into();
        let dp = dp_disparity::<f64>(&rs, Grouping::Race, &known).unwrap();
        prop_assert!(dp.excluded.contains(&"g5".to_string()));
        prop_assert!(!dp.per_group.contains_key("g5"));
    }

    #[test]
    fn rouge_is_symmetric_and_bounded(a in "[a-e ]{0,40}", b in "[a-e ]{0,40}") {
        let x: f64 = rouge_l(&a, &b);
        let y: f64 = rouge_l(&b, &a);
        prop_assert_eq!(x.to_bits(), y.to_bits());
        prop_assert!((0.0..=1.0).contains(&x));
    }

    #[test]
    fn overlap_is_a_bounded_percentage(sets in prop::collection::vec(prop::collection::btree_set(0u8..10, 0..6), 2..6)) {
        let names: Vec<Vec<String>> = sets.iter().map(|s| s.iter().map(|x| x.to_string()).collect()).collect();
        let refs: Vec<BTreeSet<&str>> = names.iter().map(|s| s.iter().map(String::as_str).collect()).collect();
        for mode in [OverlapMode::Pairwise, OverlapMode::Global] {
            let o: f64 = overlap_of_sets(&refs, mode).unwrap();
            prop_assert!((0.0..=100.0).contains(&o));
        }
        if refs.len() == 2 {
            let p: f64 = overlap_of_sets(&refs, OverlapMode::Pairwise).unwrap();
            let g: f64 = overlap_of_sets(&refs, OverlapMode::Global).unwrap();
            prop_assert!((p - g).abs() < 1e-12);
        }
    }

    #[test]
    fn parsed_letters_are_always_options(raw in ".{0,120}", marker in prop::option::of("[A-Za-z]")) {
        let opts = options();
        let text = match marker {
            Some(m) => format!("{raw}\nFinal Answer: {m}"),
            None => raw,
        };
        match parse_mcq_answer(&text, &opts) {
            ParsedAnswer::Letter(c) => prop_assert!(opts.contains_key(&c)),
            ParsedAnswer::Unparseable => {}
            ParsedAnswer::FreeText(t) => prop_assert!(false, "free text {t:?} from a closed parse"),
        }
    }

    #[test]
    fn mock_answers_parse_to_a_deterministic_option(seed in any::<u64>(), rate in 0.0f64..=1.0, item in "[a-z0-9]{1,8}", gold in prop::sample::select(vec!['A', 'B', 'C', 'D'])) {
        let spec = MockModelSpec { seed, base_correct_rate: rate, per_group_correct_rate: BTreeMap::new() };
        let model = MockModel::new(spec.clone());
        let meta = ItemMeta {
            item_id: item,
            variant_key: "race=Asian|gender=female".into(),
            group: [(Axis::Race, "Asian".to_string()), (Axis::Gender, "female".to_string())].into(),
            options: Some(options()),
            gold: gold.to_string(),
        };
        let a = model.complete("prompt", &meta).unwrap().raw_text;
        let b = model.complete("a different prompt", &meta).unwrap().raw_text;
        prop_assert_eq!(&a, &b);
        let parsed = parse_mcq_answer(&a, &options());
        let correct = parsed == ParsedAnswer::Letter(gold);
        prop_assert!(parsed.letter().is_some());
        prop_assert_eq!(correct, spec.is_correct(&meta));
    }

    #[test]
    fn variants_carry_their_values_and_neutralize_away(stem in "[a-z ]{5,40}", placeholder in any::<bool>()) {
        let question = if placeholder { format!("A {{demographic}} patient {stem}") } else { stem.clone() };
        let config = DemographicConfig::default();
        let variants = generate_variants("q", &question, &config).unwrap();
        let keys: BTreeSet<&str> = variants.iter().map(|v| v.variant_key.as_str()).collect();
        prop_assert_eq!(keys.len(), 12);
        let neutralizer = Neutralizer::from_config(&config);
        for v in &variants {
            prop_assert_eq!(&parse_variant_key(&v.variant_key).unwrap(), &v.assignment);
            for value in v.assignment.values() {
                prop_assert!(v.realized_text.contains(value.as_str()));
            }
            let neutral = neutralizer.neutralize(&v.realized_text);
            prop_assert!(!contains_attribute_value(&neutral, config.all_values()), "{neutral}");
        }
    }
}
