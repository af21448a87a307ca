use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::graphdata::event::EventRecord;
use crate::graphdata::PropagationEvent;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Token string ↔ dense index bijection. Index 0 is PAD, index 1 is UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn with_specials() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(PAD);
        v.insert(UNK);
        v
    }

    /// Index of `token`, adding it if new.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn unk(&self) -> usize {
        self.index[UNK]
    }

    /// JSON object `token → index`, keys in index order.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{");
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&serde_json::to_string(t).expect("string serialises"));
            out.push(':');
            out.push_str(&i.to_string());
        }
        out.push('}');
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, usize> = serde_json::from_str(text)?;
        let mut tokens = vec![None; map.len()];
        for (tok, &i) in &map {
            match tokens.get_mut(i) {
                Some(slot @ None) => *slot = Some(tok.clone()),
                _ => {
                    return Err(Error::Input(format!(
                        "vocabulary index {i} is not dense or repeats"
                    )))
                }
            }
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.expect("dense")).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self { tokens, index })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fsutil::read_to_string(path)?)
    }
}

/// Ground-truth planted tokens per class.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlantedRegistry {
    pub classes: BTreeMap<usize, Vec<usize>>,
}

impl PlantedRegistry {
    pub fn tokens_of(&self, class: usize) -> &[usize] {
        self.classes.get(&class).map_or(&[], Vec::as_slice)
    }

    /// Class whose planted set contains `token`.
    pub fn class_of(&self, token: usize) -> Option<usize> {
        self.classes
            .iter()
            .find(|(_, toks)| toks.contains(&token))
            .map(|(&c, _)| c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fsutil::read_to_string(path)?)?)
    }
}

pub fn event_to_json(event: &PropagationEvent) -> String {
    serde_json::to_string(&event.to_record()).expect("event serialises")
}

/// One JSON object per line, each line newline-terminated.
pub fn events_to_jsonl(events: &[PropagationEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&event_to_json(e));
        out.push('\n');
    }
    out
}

/// Parses JSONL text; `num_classes` bounds labels when given. Blank lines
/// are skipped. Errors carry the 1-based line number.
pub fn parse_events(
    text: &str,
    source: &Path,
    num_classes: Option<usize>,
) -> Result<Vec<PropagationEvent>> {
    let ingest = |line: usize, message: String| Error::Ingest {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: EventRecord =
            serde_json::from_str(raw).map_err(|e| ingest(line, format!("malformed JSON: {e}")))?;
        if let Some(c) = num_classes {
            if rec.label >= c {
                return Err(ingest(
                    line,
                    format!("unknown label {} (expected < {c})", rec.label),
                ));
            }
        }
        let event = PropagationEvent::from_record(rec).map_err(|e| ingest(line, e.to_string()))?;
        events.push(event);
    }
    Ok(events)
}

pub fn load_events(path: &Path, num_classes: Option<usize>) -> Result<Vec<PropagationEvent>> {
    parse_events(&fsutil::read_to_string(path)?, path, num_classes)
}

pub fn save_events(path: &Path, events: &[PropagationEvent]) -> Result<()> {
    fsutil::write_atomic(path, events_to_jsonl(events).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn src() -> PathBuf {
        PathBuf::from("fixture.jsonl")
    }

    #[test]
    fn empty_text_is_empty_list() {
        assert!(parse_events("", &src(), None).unwrap().is_empty());
    }

    #[test]
    fn dangling_parent_names_line() {
        let text = concat!(
            r#"{"event_id":"a","label":0,"posts":[{"post_id":"x","parent_id":null,"tokens":[2]}]}"#,
            "\n",
            r#"{"event_id":"b","label":1,"posts":[{"post_id":"x","parent_id":null,"tokens":[2]},{"post_id":"y","parent_id":"q","tokens":[3]}]}"#,
            "\n"
        );
        match parse_events(text, &src(), Some(2)).unwrap_err() {
            Error::Ingest { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("dangling"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_and_unknown_label() {
        let err = parse_events("{not json", &src(), None).unwrap_err();
        assert!(matches!(err, Error::Ingest { line: 1, .. }));
        let text =
            r#"{"event_id":"a","label":5,"posts":[{"post_id":"x","parent_id":null,"tokens":[2]}]}"#;
        let err = parse_events(text, &src(), Some(2)).unwrap_err();
        assert!(err.to_string().contains("unknown label"));
        let text = r#"{"event_id":"a","label":0,"extra":1,"posts":[]}"#;
        assert!(parse_events(text, &src(), None).is_err());
    }

    #[test]
    fn vocabulary_json_round_trip() {
        let mut v = Vocabulary::with_specials();
        v.insert("hello");
        v.insert("\"quoted\"");
        let json = v.to_json();
        assert!(json.starts_with(r#"{"<pad>":0,"<unk>":1,"hello":2"#));
        let back = Vocabulary::from_json(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.unk(), 1);
        assert!(Vocabulary::from_json(r#"{"a":0,"b":2}"#).is_err());
    }
}
