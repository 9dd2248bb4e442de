use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;

use super::ParsedAnswer;

static MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i:(final\s+)?answer)\s*(?:is)?\s*[:：]\s*[(\[*]*([A-Z])(?:[^\p{L}\p{N}]|$)").expect("valid regex"));

static LETTER_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?:^|[^\p{L}\p{N}])([A-Z])(?:[^\p{L}\p{N}]|$)").expect("valid regex"));

static FINAL_TEXT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)final\s+answer\s*[:：]").expect("valid regex"));

/// Extract an option letter from a closed-form completion. Rungs, in order:
///
/// 1. an `Final Answer: X` or `Answer: X` marker (the last `Final Answer`
///    wins, then the last `Answer`);
/// 2. exactly one distinct standalone option letter in the text;
/// 3. exactly one option whose full text occurs, case-insensitively.
///
/// Anything else is `Unparseable`. The result is always within `options`.
pub fn parse_mcq_answer(raw: &str, options: &BTreeMap<char, String>) -> ParsedAnswer {
    let mut final_marker = None;
    let mut plain_marker = None;
    for cap in MARKER.captures_iter(raw) {
        let letter = cap[2].chars().next().expect("one char");
        if !options.contains_key(&letter) {
            continue;
        }
        if cap.get(1).is_some() {
            final_marker = Some(letter);
        } else {
            plain_marker = Some(letter);
        }
    }
    if let Some(l) = final_marker.or(plain_marker) {
        return ParsedAnswer::Letter(l);
    }

    // The regex consumes one boundary char per match, so scan with overlaps.
    let mut letters = BTreeSet::new();
    let mut at = 0;
    while let Some(cap) = LETTER_TOKEN.captures_at(raw, at) {
        let m = cap.get(1).expect("group 1");
        let letter = m.as_str().chars().next().expect("one char");
        if options.contains_key(&letter) {
            letters.insert(letter);
        }
        at = m.end();
    }
    if letters.len() == 1 {
        return ParsedAnswer::Letter(*letters.first().expect("one letter"));
    }

    let lower = raw.to_lowercase();
    let hits: Vec<char> = options
        .iter()
        .filter(|(_, text)| {
            let t = text.trim().to_lowercase();
            !t.is_empty() && lower.contains(&t)
        })
        .map(|(l, _)| *l)
        .collect();
    match hits.as_slice() {
        [only] => ParsedAnswer::Letter(*only),
        _ => ParsedAnswer::Unparseable,
    }
}

/// Open-ended answer text: whatever follows the last `Final Answer:` marker,
/// or the whole completion when there is none.
pub fn extract_free_text(raw: &str) -> ParsedAnswer {
    let text = match FINAL_TEXT.find_iter(raw).last() {
        Some(m) => &raw[m.end()..],
        None => raw,
    };
    let text = text.trim();
    if text.is_empty() {
        ParsedAnswer::Unparseable
    } else {
        ParsedAnswer::FreeText(text.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abcd() -> BTreeMap<char, String> {
        [('A', "Aspirin"), ('B', "Lisinopril"), ('C', "Metoprolol"), ('D', "Insulin")]
            .map(|(l, t)| (l, t.to_string()))
            .into()
    }

    fn p(raw: &str) -> ParsedAnswer {
        parse_mcq_answer(raw, &abcd())
    }

    #[test]
    fn marker_rung() {
        assert_eq!(p("1. ACE inhibitors help [1].\nFinal Answer: C"), ParsedAnswer::Letter('C'));
        assert_eq!(p("Answer: (D)"), ParsedAnswer::Letter('D'));
        assert_eq!(p("Answer: A\nFinal Answer: B"), ParsedAnswer::Letter('B'));
        assert_eq!(p("final answer: **B**"), ParsedAnswer::Letter('B'));
        assert_eq!(p("The answer is: C"), ParsedAnswer::Letter('C'));
    }

    #[test]
    fn marker_outside_options_falls_through() {
        assert_eq!(p("Final Answer: E, though B is close"), ParsedAnswer::Letter('B'));
    }

    #[test]
    fn single_letter_rung() {
        assert_eq!(p("The best choice is B."), ParsedAnswer::Letter('B'));
        assert_eq!(p("(C)"), ParsedAnswer::Letter('C'));
        assert_eq!(p("B B B"), ParsedAnswer::Letter('B'));
    }

    #[test]
    fn ambiguous_letters() {
        assert_eq!(p("Both A and B seem plausible"), ParsedAnswer::Unparseable);
        assert_eq!(p("A,B"), ParsedAnswer::Unparseable);
    }

    #[test]
    fn option_text_rung() {
        assert_eq!(p("I would start metoprolol."), ParsedAnswer::Letter('C'));
        assert_eq!(p("aspirin or insulin"), ParsedAnswer::Unparseable);
        assert_eq!(p("no idea"), ParsedAnswer::Unparseable);
    }

    #[test]
    fn letters_inside_words_do_not_count() {
        assert_eq!(p("ABCD"), ParsedAnswer::Unparseable);
    }

    #[test]
    fn free_text() {
        assert_eq!(
            extract_free_text("steps...\nFinal Answer: Rest and fluids."),
            ParsedAnswer::FreeText("Rest and fluids.".into())
        );
        assert_eq!(extract_free_text("  Rest.  "), ParsedAnswer::FreeText("Rest.".into()));
        assert_eq!(extract_free_text("Final Answer:   "), ParsedAnswer::Unparseable);
    }
}
