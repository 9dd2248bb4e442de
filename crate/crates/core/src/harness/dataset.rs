//! QA items from JSONL, one object per line:
//! `{"id", "question", "options"?: {"A": ..}, "gold", "task"?, "answerable"?}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
    #[error("dataset {0} has no items")]
    EmptyDataset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Closed,
    Open,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub id: String,
    pub task: Task,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<BTreeMap<char, String>>,
    /// Option letter for closed items, reference answer for open ones.
    pub gold: String,
    pub answerable: u8,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawItem {
    id: String,
    #[serde(default)]
    task: Option<Task>,
    question: String,
    #[serde(default)]
    options: Option<BTreeMap<String, String>>,
    gold: String,
    #[serde(default = "one")]
    answerable: u8,
}

fn one() -> u8 {
    1
}

impl DatasetItem {
    pub fn is_closed(&self) -> bool {
        self.task == Task::Closed
    }

    pub fn gold_letter(&self) -> Option<char> {
        self.is_closed().then(|| self.gold.chars().next()).flatten()
    }

    fn from_raw(raw: RawItem) -> Result<Self, String> {
        if raw.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if raw.question.trim().is_empty() {
            return Err("empty question".into());
        }
        if raw.answerable > 1 {
            return Err(format!("answerable must be 0 or 1, got {}", raw.answerable));
        }
        let options = match raw.options {
            Some(opts) if !opts.is_empty() => {
                let mut out = BTreeMap::new();
                for (k, v) in opts {
                    let mut cs = k.chars();
                    match (cs.next(), cs.next()) {
                        (Some(c), None) if c.is_ascii_uppercase() => {
                            out.insert(c, v);
                        }
                        _ => return Err(format!("option key `{k}` is not a single uppercase letter")),
                    }
                }
                Some(out)
            }
            _ => None,
        };
        let task = raw.task.unwrap_or(if options.is_some() { Task::Closed } else { Task::Open });
        match (task, &options) {
            (Task::Closed, None) => return Err("closed item without options".into()),
            (Task::Closed, Some(o)) if o.len() < 2 => return Err("closed item needs at least two options".into()),
            (Task::Closed, Some(o)) => {
                let mut cs = raw.gold.chars();
                match (cs.next(), cs.next()) {
                    (Some(g), None) if o.contains_key(&g) => {}
                    _ => return Err(format!("gold `{}` is not one of the option letters", raw.gold)),
                }
            }
            (Task::Open, Some(_)) => return Err("open item must not carry options".into()),
            (Task::Open, None) if raw.gold.trim().is_empty() => return Err("open item needs a reference answer".into()),
            (Task::Open, None) => {}
        }
        Ok(DatasetItem {
            id: raw.id,
            task,
            question: raw.question,
            options,
            gold: raw.gold,
            answerable: raw.answerable,
        })
    }
}

/// Parse JSONL text; blank lines are skipped, line numbers are 1-based.
pub fn parse_dataset(text: &str, name: &str) -> Result<Vec<DatasetItem>, DatasetError> {
    let mut items = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let violation = |message: String| DatasetError::SchemaViolation { line: i + 1, message };
        let raw: RawItem = serde_json::from_str(line).map_err(|e| violation(e.to_string()))?;
        let item = DatasetItem::from_raw(raw).map_err(violation)?;
        if !ids.insert(item.id.clone()) {
            return Err(violation(format!("duplicate id `{}`", item.id)));
        }
        items.push(item);
    }
    if items.is_empty() {
        return Err(DatasetError::EmptyDataset(name.to_string()));
    }
    Ok(items)
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetItem>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text, &path.display().to_string())
}

/// Dataset label used in records: the file stem.
pub fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_and_open_items() {
        let text = r#"{"id":"c1","question":"Q?","options":{"A":"a","B":"b","C":"c","D":"d"},"gold":"C"}

{"id":"o1","question":"Explain.","gold":"Because.","answerable":0}"#;
        let items = parse_dataset(text, "t").unwrap();
        assert_eq!(items[0].task, Task::Closed);
        assert_eq!(items[0].gold_letter(), Some('C'));
        assert_eq!(items[1].task, Task::Open);
        assert_eq!(items[1].answerable, 0);
        assert_eq!(items[0].answerable, 1);
    }

    #[test]
    fn gold_outside_options_reports_line() {
        let text = "{\"id\":\"a\",\"question\":\"Q\",\"options\":{\"A\":\"x\",\"B\":\"y\"},\"gold\":\"A\"}\n{\"id\":\"b\",\"question\":\"Q\",\"options\":{\"A\":\"x\",\"B\":\"y\"},\"gold\":\"E\"}";
        match parse_dataset(text, "t") {
            Err(DatasetError::SchemaViolation { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn other_violations() {
        let bad = [
            r#"{"id":"a","question":"Q","task":"closed","gold":"A"}"#,
            r#"{"id":"a","question":"Q","options":{"A":"x"},"gold":"A"}"#,
            r#"{"id":"a","question":"Q","options":{"a":"x","b":"y"},"gold":"a"}"#,
            r#"{"id":"a","question":"Q","gold":" "}"#,
            r#"{"id":"a","question":"Q","gold":"x","answerable":2}"#,
            r#"{"id":"a","question":"Q","gold":"x","extra":1}"#,
            r#"not json"#,
        ];
        for b in bad {
            assert!(
                matches!(parse_dataset(b, "t"), Err(DatasetError::SchemaViolation { line: 1, .. })),
                "{b}"
            );
        }
        let dup = "{\"id\":\"a\",\"question\":\"Q\",\"gold\":\"x\"}\n{\"id\":\"a\",\"question\":\"Q\",\"gold\":\"y\"}";
        assert!(matches!(
            parse_dataset(dup, "t"),
            Err(DatasetError::SchemaViolation { line: 2, .. })
        ));
        assert!(matches!(parse_dataset("\n\n", "t"), Err(DatasetError::EmptyDataset(_))));
    }
}
