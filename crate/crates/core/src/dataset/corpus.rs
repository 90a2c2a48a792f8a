//! JSON-lines corpus: one sentence object per line with keys `tokens`,
//! `entities` and `relations`, in that order.

use std::collections::HashSet;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub id: String,
    /// First token of the mention.
    pub start: usize,
    /// One past the last token.
    pub end: usize,
    #[serde(rename = "type")]
    pub etype: String,
}

impl EntityMention {
    pub fn new(id: impl Into<String>, start: usize, end: usize, etype: impl Into<String>) -> Self {
        EntityMention {
            id: id.into(),
            start,
            end,
            etype: etype.into(),
        }
    }

    /// Token used as the mention's position anchor.
    pub fn anchor(&self) -> usize {
        self.start
    }

    pub fn contains(&self, token: usize) -> bool {
        (self.start..self.end).contains(&token)
    }

    pub fn token_indices(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRelation {
    pub arg1: String,
    pub arg2: String,
    #[serde(rename = "type")]
    pub rtype: String,
}

impl GoldRelation {
    pub fn new(arg1: impl Into<String>, arg2: impl Into<String>, rtype: impl Into<String>) -> Self {
        GoldRelation {
            arg1: arg1.into(),
            arg2: arg2.into(),
            rtype: rtype.into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    #[serde(default)]
    pub entities: Vec<EntityMention>,
    #[serde(default)]
    pub relations: Vec<GoldRelation>,
}

impl Sentence {
    pub fn entity_index(&self, id: &str) -> Option<usize> {
        self.entities.iter().position(|e| e.id == id)
    }

    /// Checks span bounds, id uniqueness and relation references. Nested or
    /// overlapping mentions are allowed.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        let mut ids = HashSet::new();
        for e in &self.entities {
            if e.start >= e.end || e.end > n {
                return Err(Error::invalid(format!(
                    "entity {} span [{}, {}) outside {} tokens",
                    e.id, e.start, e.end, n
                )));
            }
            if !ids.insert(e.id.as_str()) {
                return Err(Error::invalid(format!("duplicate entity id {}", e.id)));
            }
        }
        let mut pairs = HashSet::new();
        for r in &self.relations {
            if r.arg1 == r.arg2 {
                return Err(Error::invalid(format!("relation {} links {} to itself", r.rtype, r.arg1)));
            }
            for arg in [&r.arg1, &r.arg2] {
                if !ids.contains(arg.as_str()) {
                    return Err(Error::invalid(format!("relation references unknown entity {arg}")));
                }
            }
            let key = if r.arg1 < r.arg2 {
                (r.arg1.as_str(), r.arg2.as_str())
            } else {
                (r.arg2.as_str(), r.arg1.as_str())
            };
            if !pairs.insert(key) {
                return Err(Error::invalid(format!(
                    "more than one relation between {} and {}",
                    r.arg1, r.arg2
                )));
            }
        }
        Ok(())
    }
}

pub fn parse_line(line: &str) -> Result<Sentence> {
    let s: Sentence = serde_json::from_str(line)?;
    s.validate()?;
    Ok(s)
}

/// Reads a corpus from any buffered reader. Blank lines are skipped.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<Sentence>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s = parse_line(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

pub fn parse_corpus(path: impl AsRef<Path>) -> Result<Vec<Sentence>> {
    let file = fs::File::open(path.as_ref())?;
    read_corpus(io::BufReader::new(file))
}

pub fn serialize_sentence(s: &Sentence) -> String {
    serde_json::to_string(s).expect("sentence serializes")
}

pub fn write_corpus<W: Write>(mut w: W, corpus: &[Sentence]) -> Result<()> {
    for s in corpus {
        writeln!(w, "{}", serialize_sentence(s))?;
    }
    Ok(())
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &[Sentence]) -> Result<()> {
    let file = fs::File::create(path.as_ref())?;
    let mut w = io::BufWriter::new(file);
    write_corpus(&mut w, corpus)?;
    w.flush()?;
    Ok(())
}
