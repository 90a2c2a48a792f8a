//! Seeded synthetic corpora whose relations follow surface patterns.
//!
//! A sentence is a chain of entity mentions separated by filler words.
//! Between two adjacent mentions whose types match a [`RelationRule`], the
//! rule's trigger word is inserted with the rule's probability, and the
//! relation is emitted exactly when the trigger is present. A
//! [`CompositionRule`] then relates the outer mentions of two consecutive
//! relations, which can only be read off through the middle mention.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{EntityMention, GoldRelation, Sentence};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationRule {
    /// Relation type emitted by the rule.
    pub name: String,
    /// Type of the left mention of the adjacent pair.
    pub left: String,
    /// Type of the right mention.
    pub right: String,
    pub trigger: String,
    pub probability: f64,
    /// When set, the right mention is the relation's first argument.
    #[serde(default)]
    pub reversed: bool,
    /// Latent rules insert their trigger and feed compositions but emit no
    /// gold relation themselves.
    #[serde(default)]
    pub latent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionRule {
    pub name: String,
    /// Relation between mentions `k` and `k + 1`.
    pub first: String,
    /// Relation between mentions `k + 1` and `k + 2`.
    pub second: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub sentences: usize,
    pub entity_types: Vec<String>,
    pub min_entities: usize,
    pub max_entities: usize,
    /// Filler tokens between consecutive mentions, drawn uniformly.
    pub min_gap: usize,
    pub max_gap: usize,
    pub max_mention_len: usize,
    pub lexicon_per_type: usize,
    pub filler_words: usize,
    pub rules: Vec<RelationRule>,
    #[serde(default)]
    pub compositions: Vec<CompositionRule>,
    /// Probability that a mention's type is drawn among the right-hand
    /// types of the rules matching the previous mention, instead of
    /// uniformly. Raises how often rule chains occur.
    #[serde(default)]
    pub chain_bias: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        let rule = |name: &str, left: &str, right: &str, trigger: &str, p: f64, reversed: bool| {
            RelationRule {
                name: name.into(),
                left: left.into(),
                right: right.into(),
                trigger: trigger.into(),
                probability: p,
                reversed,
                latent: false,
            }
        };
        GeneratorSpec {
            sentences: 1000,
            entity_types: ["PER", "ORG", "GPE", "LOC", "FAC"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            min_entities: 2,
            max_entities: 12,
            min_gap: 0,
            max_gap: 3,
            max_mention_len: 2,
            lexicon_per_type: 30,
            filler_words: 60,
            rules: vec![
                rule("ORG-AFF", "PER", "ORG", "joined", 0.7, false),
                rule("PHYS", "PER", "GPE", "visited", 0.6, false),
                rule("PART-WHOLE", "ORG", "GPE", "of", 0.5, false),
                rule("PER-SOC", "PER", "PER", "befriended", 0.4, false),
                rule("ART", "FAC", "ORG", "owned_by", 0.5, true),
                rule("GEN-AFF", "LOC", "GPE", "near", 0.3, false),
            ],
            compositions: vec![],
            chain_bias: 0.0,
        }
    }
}

impl GeneratorSpec {
    /// Corpus whose only gold relation is two hops long: hidden `MEMBER` and
    /// `LOCATED` links between adjacent mentions compose into `BASED` between
    /// the outer mentions. The links themselves are not annotated.
    pub fn two_hop() -> Self {
        let rule = |name: &str, left: &str, right: &str, trigger: &str, p: f64| RelationRule {
            name: name.into(),
            left: left.into(),
            right: right.into(),
            trigger: trigger.into(),
            probability: p,
            reversed: false,
            latent: true,
        };
        GeneratorSpec {
            sentences: 500,
            entity_types: ["PER", "ORG", "GPE"].iter().map(|s| s.to_string()).collect(),
            min_entities: 3,
            max_entities: 6,
            min_gap: 1,
            max_gap: 3,
            max_mention_len: 1,
            lexicon_per_type: 20,
            filler_words: 40,
            rules: vec![
                rule("MEMBER", "PER", "ORG", "joined", 0.6),
                rule("LOCATED", "ORG", "GPE", "in", 0.6),
            ],
            compositions: vec![CompositionRule {
                name: "BASED".into(),
                first: "MEMBER".into(),
                second: "LOCATED".into(),
            }],
            chain_bias: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.entity_types.is_empty() {
            return bad("generator needs at least one entity type".into());
        }
        if self.min_entities > self.max_entities {
            return bad("min_entities exceeds max_entities".into());
        }
        if self.min_gap > self.max_gap {
            return bad("min_gap exceeds max_gap".into());
        }
        if !(0.0..=1.0).contains(&self.chain_bias) {
            return bad(format!("chain_bias {} outside [0, 1]", self.chain_bias));
        }
        if self.max_mention_len == 0 || self.lexicon_per_type == 0 {
            return bad("mentions need a positive length and lexicon".into());
        }
        if self.max_gap > 0 && self.filler_words == 0 {
            return bad("gaps need filler words".into());
        }
        let types: HashSet<&str> = self.entity_types.iter().map(String::as_str).collect();
        let mut seen = HashSet::new();
        let mut triggers = HashSet::new();
        for r in &self.rules {
            for t in [&r.left, &r.right] {
                if !types.contains(t.as_str()) {
                    return bad(format!("rule {} references unknown entity type {t}", r.name));
                }
            }
            if !(0.0..=1.0).contains(&r.probability) {
                return bad(format!("rule {} probability {} outside [0, 1]", r.name, r.probability));
            }
            if !seen.insert((r.left.as_str(), r.right.as_str())) {
                return bad(format!("two rules for adjacent types {} {}", r.left, r.right));
            }
            if !triggers.insert(r.trigger.as_str()) {
                return bad(format!("trigger {} used by two rules", r.trigger));
            }
        }
        let names: HashSet<&str> = self.rules.iter().map(|r| r.name.as_str()).collect();
        for c in &self.compositions {
            for part in [&c.first, &c.second] {
                if !names.contains(part.as_str()) {
                    return bad(format!("composition {} references unknown relation {part}", c.name));
                }
            }
        }
        Ok(())
    }

    /// Relation types the generator can emit.
    pub fn relation_types(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .rules
            .iter()
            .map(|r| r.name.clone())
            .chain(self.compositions.iter().map(|c| c.name.clone()))
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

/// Per-rule counts: how often a rule's adjacent type pattern occurred, and
/// how often its trigger (and relation) was emitted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RuleStats {
    pub opportunities: Vec<usize>,
    pub fired: Vec<usize>,
}

pub fn generate_synthetic(spec: &GeneratorSpec, seed: u64) -> Result<Vec<Sentence>> {
    generate_with_stats(spec, seed).map(|(c, _)| c)
}

pub fn generate_with_stats(spec: &GeneratorSpec, seed: u64) -> Result<(Vec<Sentence>, RuleStats)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = RuleStats {
        opportunities: vec![0; spec.rules.len()],
        fired: vec![0; spec.rules.len()],
    };
    let rule_for: HashMap<(&str, &str), usize> = spec
        .rules
        .iter()
        .enumerate()
        .map(|(i, r)| ((r.left.as_str(), r.right.as_str()), i))
        .collect();

    let corpus = (0..spec.sentences)
        .map(|_| generate_sentence(spec, &rule_for, &mut rng, &mut stats))
        .collect();
    Ok((corpus, stats))
}

fn generate_sentence(
    spec: &GeneratorSpec,
    rule_for: &HashMap<(&str, &str), usize>,
    rng: &mut ChaCha8Rng,
    stats: &mut RuleStats,
) -> Sentence {
    let n = rng.gen_range(spec.min_entities..=spec.max_entities);
    let mut types: Vec<&String> = Vec::with_capacity(n);
    for k in 0..n {
        let continuations: Vec<&String> = match k {
            0 => Vec::new(),
            _ => spec.rules.iter().filter(|r| &r.left == types[k - 1]).map(|r| &r.right).collect(),
        };
        let t = if !continuations.is_empty() && rng.gen::<f64>() < spec.chain_bias {
            continuations.choose(rng).copied()
        } else {
            spec.entity_types.choose(rng)
        };
        types.push(t.expect("non-empty types"));
    }

    let mut tokens: Vec<String> = Vec::new();
    let mut entities = Vec::with_capacity(n);
    // Relation fired between mentions k and k+1, by rule index.
    let mut links: Vec<Option<usize>> = vec![None; n.saturating_sub(1)];

    let filler = |rng: &mut ChaCha8Rng| format!("w{}", rng.gen_range(0..spec.filler_words));
    let gap = |rng: &mut ChaCha8Rng| rng.gen_range(spec.min_gap..=spec.max_gap);

    for _ in 0..gap(rng) {
        tokens.push(filler(rng));
    }
    for k in 0..n {
        let len = rng.gen_range(1..=spec.max_mention_len);
        let start = tokens.len();
        for _ in 0..len {
            let w = rng.gen_range(0..spec.lexicon_per_type);
            tokens.push(format!("{}_{}", types[k].to_lowercase(), w));
        }
        entities.push(EntityMention::new(format!("E{k}"), start, tokens.len(), types[k].clone()));

        if k + 1 < n {
            let mut gap_tokens: Vec<String> = (0..gap(rng)).map(|_| filler(rng)).collect();
            if let Some(&ri) = rule_for.get(&(types[k].as_str(), types[k + 1].as_str())) {
                stats.opportunities[ri] += 1;
                if rng.gen::<f64>() < spec.rules[ri].probability {
                    stats.fired[ri] += 1;
                    links[k] = Some(ri);
                    let at = rng.gen_range(0..=gap_tokens.len());
                    gap_tokens.insert(at, spec.rules[ri].trigger.clone());
                }
            }
            tokens.extend(gap_tokens);
        }
    }
    for _ in 0..gap(rng) {
        tokens.push(filler(rng));
    }

    let mut relations = Vec::new();
    for (k, link) in links.iter().enumerate() {
        if let Some(ri) = link {
            let r = &spec.rules[*ri];
            if r.latent {
                continue;
            }
            let (a, b) = if r.reversed { (k + 1, k) } else { (k, k + 1) };
            relations.push(GoldRelation::new(format!("E{a}"), format!("E{b}"), r.name.clone()));
        }
    }
    for k in 0..links.len().saturating_sub(1) {
        let (Some(r1), Some(r2)) = (links[k], links[k + 1]) else {
            continue;
        };
        for c in &spec.compositions {
            if spec.rules[r1].name == c.first && spec.rules[r2].name == c.second {
                relations.push(GoldRelation::new(format!("E{k}"), format!("E{}", k + 2), c.name.clone()));
                break;
            }
        }
    }

    Sentence {
        tokens,
        entities,
        relations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::corpus::serialize_sentence;

    #[test]
    fn same_seed_same_bytes() {
        let mut spec = GeneratorSpec::default();
        spec.sentences = 50;
        let a: Vec<String> = generate_synthetic(&spec, 7).unwrap().iter().map(serialize_sentence).collect();
        let b: Vec<String> = generate_synthetic(&spec, 7).unwrap().iter().map(serialize_sentence).collect();
        assert_eq!(a, b);
        let c: Vec<String> = generate_synthetic(&spec, 8).unwrap().iter().map(serialize_sentence).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn entity_count_bounds_and_validity() {
        let spec = GeneratorSpec::default();
        let corpus = generate_synthetic(&spec, 1).unwrap();
        assert_eq!(corpus.len(), spec.sentences);
        let counts: HashSet<usize> = corpus.iter().map(|s| s.entities.len()).collect();
        assert!(counts.iter().all(|&n| (2..=12).contains(&n)));
        assert!(counts.contains(&2) && counts.contains(&12));
        for s in &corpus {
            s.validate().unwrap();
        }
    }

    #[test]
    fn unknown_entity_type_rejected() {
        let mut spec = GeneratorSpec::default();
        spec.rules[0].right = "WEA".into();
        assert!(matches!(generate_synthetic(&spec, 0), Err(Error::Config(_))));

        let mut spec = GeneratorSpec::two_hop();
        spec.compositions[0].second = "NOPE".into();
        assert!(generate_synthetic(&spec, 0).is_err());
    }

    #[test]
    fn relations_follow_triggers() {
        let spec = GeneratorSpec::two_hop();
        for s in generate_synthetic(&spec, 3).unwrap() {
            for r in &s.relations {
                let a = s.entity_index(&r.arg1).unwrap();
                let b = s.entity_index(&r.arg2).unwrap();
                let (lo, hi) = (a.min(b), a.max(b));
                let between = &s.tokens[s.entities[lo].end..s.entities[hi].start];
                match r.rtype.as_str() {
                    "MEMBER" => assert!(between.contains(&"joined".to_string())),
                    "LOCATED" => assert!(between.contains(&"in".to_string())),
                    "BASED" => {
                        assert_eq!(hi - lo, 2);
                        assert!(between.contains(&"joined".to_string()));
                        assert!(between.contains(&"in".to_string()));
                    }
                    other => panic!("unexpected relation {other}"),
                }
            }
        }
    }
}
