//! The one tokenizer used everywhere: chunking, BM25, ROUGE-L and the offline
//! embedders all agree on what a token is.
//!
//! Tokens are maximal runs of Unicode alphanumeric characters, lowercased.

/// A token together with the byte span it occupies in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_spans(text).into_iter().map(|t| t.text).collect()
}

pub fn tokenize_with_spans(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        match (ch.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(make_token(text, s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(make_token(text, s, text.len()));
    }
    out
}

fn make_token(text: &str, start: usize, end: usize) -> Token {
    Token {
        text: text[start..end].to_lowercase(),
        start,
        end,
    }
}

/// Collapse whitespace runs to a single space and trim.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}
