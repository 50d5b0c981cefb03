//! Line-delimited JSON dataset loaders for knowledge texts and dialogues.

use crate::error::{Error, Result};
use serde::Deserialize;
use std::io::{BufRead, BufReader};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Speaker {
    User,
    Assistant,
}

impl Speaker {
    fn parse(s: &str) -> Option<Speaker> {
        match s {
            "user" => Some(Speaker::User),
            "assistant" => Some(Speaker::Assistant),
            _ => None,
        }
    }
}

/// One dialogue record: context turns, attached knowledge pieces, and the
/// reference response.
#[derive(Debug, Clone)]
pub struct DialogueExample {
    pub context: Vec<(Speaker, String)>,
    pub knowledge: Vec<String>,
    pub response: String,
}

impl DialogueExample {
    /// Context must be non-empty, start with the user, alternate strictly,
    /// and end with the user turn the response answers.
    pub fn validate(&self) -> Result<()> {
        if self.context.is_empty() {
            return Err(Error::contract("dialogue context is empty"));
        }
        for (i, (speaker, _)) in self.context.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::User } else { Speaker::Assistant };
            if *speaker != expected {
                return Err(Error::contract(format!(
                    "context turn {i} must be {expected:?}, speakers must alternate"
                )));
            }
        }
        if self.context.len() % 2 == 0 {
            return Err(Error::contract(
                "context must end with a user turn before the response",
            ));
        }
        if self.response.trim().is_empty() {
            return Err(Error::contract("response is empty"));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct KnowledgeLine {
    text: String,
}

#[derive(Deserialize)]
struct TurnLine {
    speaker: String,
    text: String,
}

#[derive(Deserialize)]
struct DialogueLine {
    context: Vec<TurnLine>,
    #[serde(default)]
    knowledge: Vec<String>,
    response: String,
}

/// Streaming reader over one-JSON-object-per-line files.
pub struct JsonLines {
    reader: BufReader<std::fs::File>,
    line_no: usize,
}

impl JsonLines {
    fn open(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            Error::Load(format!("cannot open {}: {e}", path.display()))
        })?;
        Ok(JsonLines {
            reader: BufReader::new(file),
            line_no: 0,
        })
    }

    fn next_line(&mut self) -> Option<Result<(usize, String)>> {
        loop {
            let mut buf = String::new();
            match self.reader.read_line(&mut buf) {
                Ok(0) => return None,
                Ok(_) => {
                    self.line_no += 1;
                    let trimmed = buf.trim();
                    if trimmed.is_empty() {
                        continue;
                    }
                    return Some(Ok((self.line_no, trimmed.to_string())));
                }
                Err(e) => return Some(Err(Error::Io(e))),
            }
        }
    }
}

/// Stream of knowledge texts in file order.
pub struct KnowledgeStream {
    lines: JsonLines,
}

impl Iterator for KnowledgeStream {
    type Item = Result<String>;

    fn next(&mut self) -> Option<Self::Item> {
        let (line_no, raw) = match self.lines.next_line()? {
            Ok(v) => v,
            Err(e) => return Some(Err(e)),
        };
        match serde_json::from_str::<KnowledgeLine>(&raw) {
            Ok(rec) if !rec.text.trim().is_empty() => Some(Ok(rec.text)),
            Ok(_) => Some(Err(Error::Schema {
                line: line_no,
                msg: "knowledge text is empty".into(),
            })),
            Err(e) => Some(Err(Error::Schema {
                line: line_no,
                msg: e.to_string(),
            })),
        }
    }
}

pub fn load_knowledge_dataset(path: &Path) -> Result<KnowledgeStream> {
    Ok(KnowledgeStream {
        lines: JsonLines::open(path)?,
    })
}

/// Stream of validated dialogue examples in file order.
pub struct DialogueStream {
    lines: JsonLines,
}

impl Iterator for DialogueStream {
    type Item = Result<DialogueExample>;

    fn next(&mut self) -> Option<Self::Item> {
        let (line_no, raw) = match self.lines.next_line()? {
            Ok(v) => v,
            Err(e) => return Some(Err(e)),
        };
        let parsed: DialogueLine = match serde_json::from_str(&raw) {
            Ok(v) => v,
            Err(e) => {
                return Some(Err(Error::Schema {
                    line: line_no,
                    msg: e.to_string(),
                }))
            }
        };
        let mut context = Vec::with_capacity(parsed.context.len());
        for turn in parsed.context {
            match Speaker::parse(&turn.speaker) {
                Some(s) => context.push((s, turn.text)),
                None => {
                    return Some(Err(Error::Schema {
                        line: line_no,
                        msg: format!("unknown speaker {:?}", turn.speaker),
                    }))
                }
            }
        }
        let example = DialogueExample {
            context,
            knowledge: parsed.knowledge,
            response: parsed.response,
        };
        if let Err(e) = example.validate() {
            return Some(Err(Error::Schema {
                line: line_no,
                msg: e.to_string(),
            }));
        }
        Some(Ok(example))
    }
}

pub fn load_dialogue_dataset(path: &Path) -> Result<DialogueStream> {
    Ok(DialogueStream {
        lines: JsonLines::open(path)?,
    })
}
