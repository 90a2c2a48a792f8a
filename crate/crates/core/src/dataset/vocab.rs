use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::corpus::Sentence;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;
/// Type index used for tokens outside every entity mention.
pub const NULL_TYPE_INDEX: usize = 0;
pub const NO_RELATION: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    LeftToRight,
    RightToLeft,
}

/// The `2r + 1` class inventory: label 0 is "no relation", relation `k`
/// occupies `2k + 1` (left-to-right) and `2k + 2` (right-to-left).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    relation_types: Vec<String>,
}

impl LabelSet {
    /// `relation_types` are sorted and deduplicated.
    pub fn new(mut relation_types: Vec<String>) -> Self {
        relation_types.sort();
        relation_types.dedup();
        LabelSet { relation_types }
    }

    pub fn len(&self) -> usize {
        2 * self.relation_types.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn relation_types(&self) -> &[String] {
        &self.relation_types
    }

    pub fn relation_index(&self, rtype: &str) -> Option<usize> {
        self.relation_types.binary_search_by(|t| t.as_str().cmp(rtype)).ok()
    }

    pub fn label(&self, relation: usize, dir: Direction) -> usize {
        match dir {
            Direction::LeftToRight => 2 * relation + 1,
            Direction::RightToLeft => 2 * relation + 2,
        }
    }

    /// `None` for the no-relation class.
    pub fn decode(&self, label: usize) -> Option<(usize, Direction)> {
        if label == NO_RELATION || label >= self.len() {
            return None;
        }
        let k = (label - 1) / 2;
        let dir = if label % 2 == 1 {
            Direction::LeftToRight
        } else {
            Direction::RightToLeft
        };
        Some((k, dir))
    }

    pub fn name(&self, label: usize) -> String {
        match self.decode(label) {
            None => "NONE".to_string(),
            Some((k, Direction::LeftToRight)) => format!("{}-l2r", self.relation_types[k]),
            Some((k, Direction::RightToLeft)) => format!("{}-r2l", self.relation_types[k]),
        }
    }
}

/// Index tables for words, entity types and relation labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    entity_types: Vec<String>,
    labels: LabelSet,
    #[serde(skip)]
    word_index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Words are `PAD`, `UNK`, then every corpus (and pretrained) word in
    /// sorted order. Entity types get indices from 1; 0 is the null type.
    pub fn build(corpus: &[Sentence], pretrained_words: Option<&[String]>) -> Self {
        let mut words = BTreeSet::new();
        let mut types = BTreeSet::new();
        let mut rels = BTreeSet::new();
        for s in corpus {
            words.extend(s.tokens.iter().cloned());
            types.extend(s.entities.iter().map(|e| e.etype.clone()));
            rels.extend(s.relations.iter().map(|r| r.rtype.clone()));
        }
        if let Some(extra) = pretrained_words {
            words.extend(extra.iter().cloned());
        }
        words.remove(PAD);
        words.remove(UNK);
        let word_list = [PAD.to_string(), UNK.to_string()]
            .into_iter()
            .chain(words)
            .collect();
        Self::from_parts(
            word_list,
            types.into_iter().collect(),
            LabelSet::new(rels.into_iter().collect()),
        )
    }

    /// `entity_types` excludes the null type.
    pub fn from_parts(words: Vec<String>, entity_types: Vec<String>, labels: LabelSet) -> Self {
        let mut v = Vocabulary {
            words,
            entity_types,
            labels,
            word_index: HashMap::new(),
        };
        v.reindex();
        v
    }

    /// Rebuilds lookup tables after deserialization.
    pub fn reindex(&mut self) {
        self.word_index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word_id(&self, word: &str) -> usize {
        self.word_index.get(word).copied().unwrap_or(UNK_INDEX)
    }

    /// Number of rows in the type table, including the null type.
    pub fn type_count(&self) -> usize {
        self.entity_types.len() + 1
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    /// Unknown types fall back to the null type.
    pub fn type_id(&self, etype: &str) -> usize {
        self.entity_types
            .iter()
            .position(|t| t == etype)
            .map(|i| i + 1)
            .unwrap_or(NULL_TYPE_INDEX)
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }
}
