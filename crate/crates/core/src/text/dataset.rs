use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Speaker {
    User,
    System,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub utterance: String,
}

/// One question-answering instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub query: String,
    pub documents: Vec<String>,
    pub positive_index: usize,
    pub answer: String,
    pub y_safe: u8,
    #[serde(default)]
    pub turns: Vec<Turn>,
}

impl Sample {
    pub fn is_unsafe(&self) -> bool {
        self.y_safe == 1
    }

    pub fn is_multiturn(&self) -> bool {
        !self.turns.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("sample {}: {m}", self.id)));
        if self.documents.is_empty() {
            return bad("no documents".into());
        }
        if self.positive_index >= self.documents.len() {
            return bad(format!(
                "positive_index {} outside {} documents",
                self.positive_index,
                self.documents.len()
            ));
        }
        match self.y_safe {
            0 if self.answer.is_empty() => return bad("safe sample with empty answer".into()),
            1 if !self.answer.is_empty() => return bad("unsafe sample carries an answer".into()),
            0 | 1 => {}
            y => return bad(format!("y_safe must be 0 or 1, got {y}")),
        }
        if self.is_multiturn() {
            validate_turns(&self.turns)?;
        }
        Ok(())
    }
}

/// Turns must alternate starting with USER and end on a USER turn.
pub(crate) fn validate_turns(turns: &[Turn]) -> Result<()> {
    if turns.is_empty() {
        return Err(Error::Validation("dialogue has no turns".into()));
    }
    for (i, t) in turns.iter().enumerate() {
        let want = if i % 2 == 0 { Speaker::User } else { Speaker::System };
        if t.speaker != want {
            return Err(Error::Validation(format!("turn {i} should be {want:?}, found {:?}", t.speaker)));
        }
    }
    if turns.last().map(|t| t.speaker) != Some(Speaker::User) {
        return Err(Error::Validation("dialogue must end with a USER turn".into()));
    }
    Ok(())
}

pub fn write_dataset(samples: &[Sample], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s).map_err(|e| Error::Validation(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample =
            serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        s.validate()?;
        if !ids.insert(s.id.clone()) {
            return Err(Error::Validation(format!("duplicate sample id {} at line {}", s.id, i + 1)));
        }
        out.push(s);
    }
    Ok(out)
}
