//! Softmax over the `2r + 1` directional classes and reconciliation of the
//! two predictions made for each unordered pair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Direction, LabelSet, NO_RELATION};
use crate::edge::glorot;
use crate::error::{Error, Result};
use crate::numerics::{softmax, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    /// `W_r`, `[n_b, n_r]`.
    pub weights: ParamId,
    /// `b_r`, `[n_r]`.
    pub bias: ParamId,
    pub classes: usize,
}

impl ClassifierParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, classes: usize, rng: &mut R) -> Result<Self> {
        if classes < 3 || classes.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "class count must be odd and at least 3, got {classes}"
            )));
        }
        let weights = store.add("classifier.weights", ParamKind::Weight, glorot(dim, classes, rng));
        let bias = store.add("classifier.bias", ParamKind::Bias, Tensor::zeros(&[classes]));
        Ok(ClassifierParams {
            weights,
            bias,
            classes,
        })
    }
}

/// Class scores `v W_r + b_r` for stacked pair representations `[P, n_b]`.
pub fn logits(tape: &mut Tape<'_>, reps: Var, weights: Var, bias: Var) -> Result<Var> {
    let scores = tape.matmul(reps, weights)?;
    tape.add_row_bias(scores, bias)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairPrediction {
    pub head: usize,
    pub tail: usize,
    pub probs: Vec<f64>,
    pub label: usize,
    /// Probability of the arg-max class.
    pub confidence: f64,
}

impl PairPrediction {
    /// Ties in the arg-max go to the lowest class index.
    pub fn from_logits(head: usize, tail: usize, scores: &[f64]) -> Self {
        let probs = softmax(scores);
        let (label, confidence) = probs
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best });
        PairPrediction {
            head,
            tail,
            probs,
            label,
            confidence,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.label != NO_RELATION
    }
}

/// Single-pair classification: `softmax(W_r v + b_r)`.
pub fn classify(v: &[f64], weights: &Tensor, bias: &Tensor) -> Result<PairPrediction> {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::vector(v.to_vec())?);
    let w = tape.input(weights.clone());
    let b = tape.input(bias.clone());
    let out = logits(&mut tape, x, w, b)?;
    Ok(PairPrediction::from_logits(0, 1, tape.value(out).data()))
}

/// A directed relation between two entities of one sentence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DirectedRelation {
    pub head: usize,
    pub tail: usize,
    pub relation: usize,
}

fn unfold(p: &PairPrediction, labels: &LabelSet) -> Option<DirectedRelation> {
    let (relation, dir) = labels.decode(p.label)?;
    let (head, tail) = match dir {
        Direction::LeftToRight => (p.head, p.tail),
        Direction::RightToLeft => (p.tail, p.head),
    };
    Some(DirectedRelation {
        head,
        tail,
        relation,
    })
}

/// Final decision for the unordered pair covered by `p_ij` and `p_ji`.
///
/// A lone positive prediction wins over a negative one regardless of
/// confidence. Two positives that unfold to the same directed relation
/// agree; otherwise the more confident one is kept, and `p_ij` wins ties.
pub fn resolve_directions(
    p_ij: &PairPrediction,
    p_ji: &PairPrediction,
    labels: &LabelSet,
) -> Result<Option<DirectedRelation>> {
    if p_ij.head != p_ji.tail || p_ij.tail != p_ji.head || p_ij.head == p_ij.tail {
        return Err(Error::invalid(format!(
            "predictions ({}, {}) and ({}, {}) do not cover one pair",
            p_ij.head, p_ij.tail, p_ji.head, p_ji.tail
        )));
    }
    Ok(match (unfold(p_ij, labels), unfold(p_ji, labels)) {
        (None, None) => None,
        (Some(a), None) => Some(a),
        (None, Some(b)) => Some(b),
        (Some(a), Some(b)) if a == b => Some(a),
        (Some(a), Some(b)) => {
            if p_ji.confidence > p_ij.confidence {
                Some(b)
            } else {
                Some(a)
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> LabelSet {
        LabelSet::new(vec!["PART-WHOLE".into(), "PHYS".into()])
    }

    fn pred(head: usize, tail: usize, label: usize, confidence: f64) -> PairPrediction {
        PairPrediction {
            head,
            tail,
            probs: vec![],
            label,
            confidence,
        }
    }

    #[test]
    fn zero_weights_give_uniform() {
        let p = classify(&[0.3, -1.0], &Tensor::zeros(&[2, 13]), &Tensor::zeros(&[13])).unwrap();
        for x in &p.probs {
            assert!((x - 1.0 / 13.0).abs() < 1e-15);
        }
        let mut b = vec![0.0; 13];
        b[0] = 10.0;
        let p = classify(&[0.3, -1.0], &Tensor::zeros(&[2, 13]), &Tensor::vector(b).unwrap()).unwrap();
        assert_eq!(p.label, 0);
        assert!(p.confidence > 0.99);
    }

    #[test]
    fn resolution_cases() {
        let l = labels();
        let phys_l2r = l.label(1, Direction::LeftToRight);
        let phys_r2l = l.label(1, Direction::RightToLeft);
        let pw_l2r = l.label(0, Direction::LeftToRight);

        assert_eq!(resolve_directions(&pred(0, 1, 0, 0.9), &pred(1, 0, 0, 0.8), &l).unwrap(), None);

        let d = resolve_directions(&pred(0, 1, 0, 0.9), &pred(1, 0, phys_l2r, 0.6), &l).unwrap();
        assert_eq!(d, Some(DirectedRelation { head: 1, tail: 0, relation: 1 }));

        let d = resolve_directions(&pred(0, 1, phys_l2r, 0.7), &pred(1, 0, pw_l2r, 0.8), &l).unwrap();
        assert_eq!(d, Some(DirectedRelation { head: 1, tail: 0, relation: 0 }));

        let d = resolve_directions(&pred(0, 1, phys_l2r, 0.7), &pred(1, 0, phys_r2l, 0.9), &l).unwrap();
        assert_eq!(d, Some(DirectedRelation { head: 0, tail: 1, relation: 1 }));

        // Equal confidence: the first argument wins.
        let d = resolve_directions(&pred(0, 1, phys_l2r, 0.5), &pred(1, 0, pw_l2r, 0.5), &l).unwrap();
        assert_eq!(d, Some(DirectedRelation { head: 0, tail: 1, relation: 1 }));
    }

    #[test]
    fn mismatched_pair_rejected() {
        let l = labels();
        assert!(resolve_directions(&pred(0, 1, 0, 0.5), &pred(2, 0, 0, 0.5), &l).is_err());
    }
}
