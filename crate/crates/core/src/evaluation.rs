//! Micro precision/recall/F1 over directed relation decisions, entity-count
//! breakdowns and the approximate randomization significance test.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::DirectedRelation;
use crate::dataset::Sentence;
use crate::error::{Error, Result};

/// One positive directed decision: the prediction file's line format.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Decision {
    pub sentence_index: usize,
    pub head: String,
    pub tail: String,
    #[serde(rename = "type")]
    pub rtype: String,
}

pub type DecisionSet = BTreeSet<Decision>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn between(gold: &DecisionSet, pred: &DecisionSet) -> Self {
        let tp = gold.intersection(pred).count();
        Counts {
            tp,
            fp: pred.len() - tp,
            fn_: gold.len() - tp,
        }
    }

    pub fn prf(&self) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Exact, direction-sensitive matching on (sentence, head, tail, type).
pub fn micro_prf(gold: &DecisionSet, pred: &DecisionSet) -> Prf {
    Counts::between(gold, pred).prf()
}

/// Gold decisions of a corpus, keyed by position in the corpus.
pub fn gold_decisions(corpus: &[Sentence]) -> DecisionSet {
    corpus
        .iter()
        .enumerate()
        .flat_map(|(k, s)| {
            s.relations.iter().map(move |r| Decision {
                sentence_index: k,
                head: r.arg1.clone(),
                tail: r.arg2.clone(),
                rtype: r.rtype.clone(),
            })
        })
        .collect()
}

/// Converts index-based relations of sentence `k` to decisions.
pub fn to_decisions(
    k: usize,
    sentence: &Sentence,
    relations: &[DirectedRelation],
    relation_types: &[String],
) -> Vec<Decision> {
    relations
        .iter()
        .map(|d| Decision {
            sentence_index: k,
            head: sentence.entities[d.head].id.clone(),
            tail: sentence.entities[d.tail].id.clone(),
            rtype: relation_types[d.relation].clone(),
        })
        .collect()
}

pub fn read_decisions(path: impl AsRef<Path>) -> Result<DecisionSet> {
    let reader = BufReader::new(fs::File::open(path.as_ref())?);
    let mut out = DecisionSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Decision = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(d);
    }
    Ok(out)
}

pub fn write_decisions<W: Write>(mut w: W, set: &DecisionSet) -> Result<()> {
    for d in set {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_decisions(path: impl AsRef<Path>, set: &DecisionSet) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path.as_ref())?);
    write_decisions(&mut w, set)?;
    w.flush()?;
    Ok(())
}

/// Entity-count buckets used when none are given.
pub fn default_buckets() -> Vec<Range<usize>> {
    vec![2..3, 3..4, 4..6, 6..12, 12..23]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketScore {
    pub range: Range<usize>,
    pub sentences: usize,
    pub counts: Counts,
    /// `None` when no sentence falls in the bucket.
    pub prf: Option<Prf>,
}

/// Scores restricted to sentences whose entity count lies in each bucket.
pub fn breakdown_by_entity_count(
    gold: &DecisionSet,
    pred: &DecisionSet,
    sentences: &[Sentence],
    buckets: &[Range<usize>],
) -> Result<Vec<BucketScore>> {
    let mut sorted: Vec<&Range<usize>> = buckets.iter().collect();
    sorted.sort_by_key(|r| (r.start, r.end));
    for r in &sorted {
        if r.start >= r.end {
            return Err(Error::invalid(format!("empty bucket {r:?}")));
        }
    }
    for w in sorted.windows(2) {
        if w[1].start < w[0].end {
            return Err(Error::invalid(format!("buckets {:?} and {:?} overlap", w[0], w[1])));
        }
    }
    let by_sentence = |set: &DecisionSet| {
        let mut m: BTreeMap<usize, DecisionSet> = BTreeMap::new();
        for d in set {
            m.entry(d.sentence_index).or_default().insert(d.clone());
        }
        m
    };
    let (g, p) = (by_sentence(gold), by_sentence(pred));
    let empty = DecisionSet::new();
    Ok(buckets
        .iter()
        .map(|range| {
            let mut counts = Counts::default();
            let mut n = 0;
            for (k, s) in sentences.iter().enumerate() {
                if !range.contains(&s.entities.len()) {
                    continue;
                }
                n += 1;
                counts = counts + Counts::between(g.get(&k).unwrap_or(&empty), p.get(&k).unwrap_or(&empty));
            }
            BucketScore {
                range: range.clone(),
                sentences: n,
                counts,
                prf: (n > 0).then(|| counts.prf()),
            }
        })
        .collect())
}

/// Per-sentence decision groups used by the randomization test.
fn group(set: &DecisionSet) -> BTreeMap<usize, Vec<Decision>> {
    let mut m: BTreeMap<usize, Vec<Decision>> = BTreeMap::new();
    for d in set {
        m.entry(d.sentence_index).or_default().push(d.clone());
    }
    m
}

/// Sentence indices mentioned by either system, in order.
fn units(a: &DecisionSet, b: &DecisionSet) -> Vec<usize> {
    a.iter()
        .chain(b)
        .map(|d| d.sentence_index)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Absolute F1 difference after swapping the outputs of the sentences
/// whose `swap` flag is set.
fn swapped_statistic(
    gold: &DecisionSet,
    a: &BTreeMap<usize, Vec<Decision>>,
    b: &BTreeMap<usize, Vec<Decision>>,
    units: &[usize],
    swap: &[bool],
) -> f64 {
    let mut sa = DecisionSet::new();
    let mut sb = DecisionSet::new();
    for (k, &s) in units.iter().zip(swap) {
        let (from_a, from_b) = if s { (b.get(k), a.get(k)) } else { (a.get(k), b.get(k)) };
        sa.extend(from_a.into_iter().flatten().cloned());
        sb.extend(from_b.into_iter().flatten().cloned());
    }
    (micro_prf(gold, &sa).f1 - micro_prf(gold, &sb).f1).abs()
}

/// Tolerance when comparing shuffled statistics with the observed one.
pub const AR_TOLERANCE: f64 = 1e-12;

/// Two-sided approximate randomization test on the micro-F1 difference.
/// Returns `(count + 1) / (iterations + 1)`.
pub fn approx_randomization(
    pred_a: &DecisionSet,
    pred_b: &DecisionSet,
    gold: &DecisionSet,
    iterations: usize,
    seed: u64,
) -> Result<f64> {
    if iterations == 0 {
        return Err(Error::invalid("approximate randomization needs at least one iteration"));
    }
    let observed = (micro_prf(gold, pred_a).f1 - micro_prf(gold, pred_b).f1).abs();
    let (a, b) = (group(pred_a), group(pred_b));
    let units = units(pred_a, pred_b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut swap = vec![false; units.len()];
    let mut count = 0usize;
    for _ in 0..iterations {
        swap.iter_mut().for_each(|s| *s = rng.gen_bool(0.5));
        if swapped_statistic(gold, &a, &b, &units, &swap) >= observed - AR_TOLERANCE {
            count += 1;
        }
    }
    Ok((count + 1) as f64 / (iterations + 1) as f64)
}

/// Exact fraction of the `2^u` swap patterns whose statistic reaches the
/// observed one, over the `u` sentences either system mentions.
pub fn exact_randomization(pred_a: &DecisionSet, pred_b: &DecisionSet, gold: &DecisionSet) -> Result<f64> {
    let units = units(pred_a, pred_b);
    if units.len() > 20 {
        return Err(Error::invalid("exact enumeration is limited to 20 sentences"));
    }
    let observed = (micro_prf(gold, pred_a).f1 - micro_prf(gold, pred_b).f1).abs();
    let (a, b) = (group(pred_a), group(pred_b));
    let total = 1usize << units.len();
    let hits = (0..total)
        .filter(|mask| {
            let swap: Vec<bool> = (0..units.len()).map(|i| mask >> i & 1 == 1).collect();
            swapped_statistic(gold, &a, &b, &units, &swap) >= observed - AR_TOLERANCE
        })
        .count();
    Ok(hits as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub gold: usize,
    pub predicted: usize,
    pub counts: Counts,
    pub prf: Prf,
    pub buckets: Option<Vec<BucketScore>>,
    pub significance: Option<Significance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub f1_a: f64,
    pub f1_b: f64,
    pub iterations: usize,
    pub seed: u64,
    pub p_value: f64,
}

impl Report {
    pub fn new(gold: &DecisionSet, pred: &DecisionSet) -> Self {
        let counts = Counts::between(gold, pred);
        Report {
            gold: gold.len(),
            predicted: pred.len(),
            counts,
            prf: counts.prf(),
            buckets: None,
            significance: None,
        }
    }

    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "P={:.3} R={:.3} F1={:.3}  (tp={} fp={} fn={}, gold={} pred={})",
            self.prf.precision,
            self.prf.recall,
            self.prf.f1,
            self.counts.tp,
            self.counts.fp,
            self.counts.fn_,
            self.gold,
            self.predicted
        );
        if let Some(buckets) = &self.buckets {
            let _ = writeln!(s, "{:<10} {:>9} {:>7} {:>7} {:>7}", "entities", "sentences", "P", "R", "F1");
            for b in buckets {
                let label = if b.range.end == b.range.start + 1 {
                    b.range.start.to_string()
                } else {
                    format!("[{},{})", b.range.start, b.range.end)
                };
                match &b.prf {
                    Some(p) => {
                        let _ = writeln!(
                            s,
                            "{:<10} {:>9} {:>7.3} {:>7.3} {:>7.3}",
                            label, b.sentences, p.precision, p.recall, p.f1
                        );
                    }
                    None => {
                        let _ = writeln!(s, "{:<10} {:>9} {:>7} {:>7} {:>7}", label, 0, "-", "-", "-");
                    }
                }
            }
        }
        if let Some(sig) = &self.significance {
            let _ = writeln!(
                s,
                "AR test: F1(A)={:.4} F1(B)={:.4} p={:.4} ({} iterations, seed {})",
                sig.f1_a, sig.f1_b, sig.p_value, sig.iterations, sig.seed
            );
        }
        s
    }
}
