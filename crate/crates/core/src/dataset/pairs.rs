//! Ordered entity pairs, their directional labels, and relative positions.

use super::corpus::Sentence;
use super::vocab::{Direction, LabelSet};

/// One ordered entity pair of a sentence with its class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairInstance {
    pub sentence: usize,
    /// Entity index of the head (first member of the ordered pair).
    pub head: usize,
    pub tail: usize,
    /// 0 is "no relation".
    pub label: usize,
}

/// All `n(n-1)` ordered pairs `(i, j)`, `i != j`, head-major.
pub fn ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out.push((i, j));
            }
        }
    }
    out
}

/// Enumerates the ordered pairs of a sentence. A gold relation `(a, b, R)`
/// labels `(a, b)` with R left-to-right and `(b, a)` with R right-to-left;
/// all other pairs, and relations whose type is not in `labels`, get label 0.
pub fn generate_pairs(sentence_index: usize, s: &Sentence, labels: &LabelSet) -> Vec<PairInstance> {
    let n = s.entities.len();
    let mut grid = vec![0usize; n * n];
    for r in &s.relations {
        let (Some(a), Some(b)) = (s.entity_index(&r.arg1), s.entity_index(&r.arg2)) else {
            continue;
        };
        if let Some(k) = labels.relation_index(&r.rtype) {
            grid[a * n + b] = labels.label(k, Direction::LeftToRight);
            grid[b * n + a] = labels.label(k, Direction::RightToLeft);
        }
    }
    ordered_pairs(n)
        .into_iter()
        .map(|(i, j)| PairInstance {
            sentence: sentence_index,
            head: i,
            tail: j,
            label: grid[i * n + j],
        })
        .collect()
}

/// Signed offset of token `from` relative to token `to`: negative when
/// `from` comes first in reading order.
pub fn relative_position(from: usize, to: usize) -> i64 {
    from as i64 - to as i64
}

/// Offsets beyond this magnitude share a "far" bucket on each side.
pub const MAX_OFFSET: i64 = 60;
/// Sentinel for the far buckets after clipping.
pub const FAR_OFFSET: i64 = MAX_OFFSET + 1;
/// Rows in the position table: offsets -60..=60 plus the two far buckets.
pub const POSITION_BUCKETS: usize = (2 * FAR_OFFSET + 1) as usize;

/// Maps an offset into `[-FAR_OFFSET, FAR_OFFSET]`; `±FAR_OFFSET` are the far buckets.
pub fn clip_offset(offset: i64) -> i64 {
    offset.clamp(-FAR_OFFSET, FAR_OFFSET)
}

pub fn position_bucket(offset: i64) -> usize {
    (clip_offset(offset) + FAR_OFFSET) as usize
}
