//! Model calls: a hosted chat-completion endpoint or a seeded mock, plus
//! answer extraction.

mod mock;
mod parse;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use mock::{MockModel, MockModelSpec};
pub use parse::{extract_free_text, parse_mcq_answer};

use crate::http::{HttpClient, HttpError, ModelEndpoint};
use crate::variants::Assignment;

/// What was extracted from a completion.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ParsedAnswer {
    #[serde(rename = "option")]
    Letter(char),
    FreeText(String),
    Unparseable,
}

impl ParsedAnswer {
    pub fn letter(&self) -> Option<char> {
        match self {
            ParsedAnswer::Letter(c) => Some(*c),
            _ => None,
        }
    }

    pub fn text(&self) -> Option<&str> {
        match self {
            ParsedAnswer::FreeText(t) => Some(t),
            _ => None,
        }
    }
}

/// Per-call metadata the mock needs and the parser uses.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemMeta {
    pub item_id: String,
    pub variant_key: String,
    pub group: Assignment,
    /// Option letter → text; `None` for open-ended items.
    pub options: Option<BTreeMap<char, String>>,
    /// Gold option letter (closed) or reference answer (open).
    pub gold: String,
}

/// Raw output of one model call.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub raw_text: String,
    pub latency: Duration,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub raw_text: String,
    pub parsed: ParsedAnswer,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

pub trait ChatModel: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, prompt: &str, item: &ItemMeta) -> Result<Completion, HttpError>;
}

/// Chat-completion client: POST `<base_url>/chat/completions` with a single
/// user message; the answer is `choices[0].message.content`.
pub struct RemoteChatModel {
    client: HttpClient,
}

impl RemoteChatModel {
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, HttpError> {
        Ok(RemoteChatModel {
            client: HttpClient::new(endpoint)?,
        })
    }
}

impl ChatModel for RemoteChatModel {
    fn id(&self) -> String {
        format!("remote:{}", self.client.endpoint().model_name)
    }

    fn complete(&self, prompt: &str, _item: &ItemMeta) -> Result<Completion, HttpError> {
        let ep = self.client.endpoint();
        let body = json!({
            "model": ep.model_name,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": ep.temperature,
            "max_tokens": ep.max_tokens,
        });
        let resp = self.client.post_json("chat/completions", &body)?;
        let text = resp
            .body
            .pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .ok_or_else(|| HttpError::MalformedResponse("missing choices[0].message.content".into()))?;
        Ok(Completion {
            raw_text: text.to_string(),
            latency: resp.latency,
            attempt_count: resp.attempts,
        })
    }
}

/// Call the model and extract an answer: an option letter for closed items,
/// free text for open ones.
pub fn generate(model: &dyn ChatModel, prompt: &str, item: &ItemMeta) -> Result<GenerationResult, HttpError> {
    let started = Instant::now();
    let completion = model.complete(prompt, item)?;
    let parsed = match &item.options {
        Some(opts) => parse_mcq_answer(&completion.raw_text, opts),
        None => extract_free_text(&completion.raw_text),
    };
    let latency = completion.latency.max(started.elapsed());
    Ok(GenerationResult {
        raw_text: completion.raw_text,
        parsed,
        latency_ms: latency.as_millis() as u64,
        attempt_count: completion.attempt_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread;

    /// Minimal HTTP server answering each connection with the next canned
    /// status and body.
    fn stub_server(replies: Vec<(u16, String)>) -> (String, thread::JoinHandle<usize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = thread::spawn(move || {
            let mut served = 0;
            for (status, body) in replies {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                let resp = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
                served += 1;
            }
            served
        });
        (format!("http://{addr}/v1"), handle)
    }

    fn item() -> ItemMeta {
        ItemMeta {
            item_id: "q1".into(),
            variant_key: "base".into(),
            group: Assignment::new(),
            options: Some([('A', "x".to_string()), ('B', "y".to_string())].into()),
            gold: "B".into(),
        }
    }

    fn endpoint(url: &str, retries: u32) -> ModelEndpoint {
        let mut ep = ModelEndpoint::new(url, "stub");
        ep.max_retries = retries;
        ep.backoff_ms = 1;
        ep
    }

    const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"Final Answer: B"}}]}"#;

    #[test]
    fn rate_limited_twice_then_ok() {
        let (url, server) = stub_server(vec![(429, "{}".into()), (429, "{}".into()), (200, OK.into())]);
        let model = RemoteChatModel::new(endpoint(&url, 3)).unwrap();
        let r = generate(&model, "prompt", &item()).unwrap();
        assert_eq!(r.attempt_count, 3);
        assert_eq!(r.parsed, ParsedAnswer::Letter('B'));
        assert_eq!(server.join().unwrap(), 3);
    }

    #[test]
    fn gives_up_after_max_retries_plus_one() {
        let (url, server) = stub_server(vec![(503, "{}".into()), (503, "{}".into())]);
        let model = RemoteChatModel::new(endpoint(&url, 1)).unwrap();
        let err = generate(&model, "prompt", &item()).unwrap_err();
        assert!(matches!(err, HttpError::Server { status: 503, attempts: 2 }));
        assert_eq!(server.join().unwrap(), 2);
    }

    #[test]
    fn malformed_body() {
        let (url, server) = stub_server(vec![(200, r#"{"choices":[]}"#.into())]);
        let model = RemoteChatModel::new(endpoint(&url, 0)).unwrap();
        assert!(matches!(generate(&model, "p", &item()), Err(HttpError::MalformedResponse(_))));
        server.join().unwrap();
    }

    #[test]
    fn parsed_answer_wire_format() {
        assert_eq!(
            serde_json::to_string(&ParsedAnswer::Letter('C')).unwrap(),
            r#"{"kind":"option","value":"C"}"#
        );
        assert_eq!(
            serde_json::to_string(&ParsedAnswer::Unparseable).unwrap(),
            r#"{"kind":"unparseable"}"#
        );
    }
}
