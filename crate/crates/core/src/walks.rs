//! Walk aggregation over the sentence's entity graph.
//!
//! Two consecutive edges combine as `sigmoid(v_ik ⊙ (W_b v_kj))`; one
//! aggregation step turns walks of length up to λ into walks of length up
//! to 2λ via `β v_ij + (1 - β) Σ_{k≠i,j} combine(v_ik, v_kj)`. The same
//! `W_b` and `β` are used at every step.

use rand::Rng;

use crate::edge::glorot;
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamKind, ParamStore, Tape, Var};

/// Walk representations for every ordered pair of an `n`-entity sentence,
/// stored as `[n(n-1), n_b]` rows in head-major order (diagonal omitted).
#[derive(Clone, Debug)]
pub struct EdgeTensor {
    pub reps: Var,
    pub entities: usize,
    /// Maximum walk length represented (1, 2, 4, ...).
    pub length: usize,
}

impl EdgeTensor {
    pub fn new(reps: Var, entities: usize) -> Self {
        EdgeTensor {
            reps,
            entities,
            length: 1,
        }
    }

    /// Row of the ordered pair `(i, j)`, `i != j`.
    pub fn row(&self, i: usize, j: usize) -> usize {
        pair_row(self.entities, i, j)
    }
}

pub fn pair_row(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i != j && i < n && j < n);
    i * (n - 1) + if j < i { j } else { j - 1 }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WalkLayer {
    /// `W_b`, `[n_b, n_b]`, applied as `W_b · v`.
    pub transition: ParamId,
    pub beta: f64,
}

impl WalkLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, beta: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Config(format!("beta {beta} outside [0, 1]")));
        }
        let transition = store.add("walk.transition", ParamKind::Weight, glorot(dim, dim, rng));
        Ok(WalkLayer { transition, beta })
    }
}

/// `sigmoid(v_ik ⊙ (W_b v_kj))` for row vectors `[1, n_b]`.
pub fn walk_combine(tape: &mut Tape<'_>, v_ik: Var, v_kj: Var, transition: Var) -> Result<Var> {
    let mapped = tape.matmul_bt(v_kj, transition)?;
    let gated = tape.mul(v_ik, mapped)?;
    Ok(tape.sigmoid(gated))
}

/// One doubling step, computed from the input tensor only.
pub fn walk_aggregate(tape: &mut Tape<'_>, edges: &EdgeTensor, transition: Var, beta: f64) -> Result<EdgeTensor> {
    let n = edges.entities;
    if n < 2 {
        return Err(Error::invalid("walk aggregation needs at least two entities"));
    }
    let kept = tape.scale(edges.reps, beta);
    let reps = if n == 2 {
        kept
    } else {
        let rows = n * (n - 1);
        let mut left = Vec::with_capacity(rows * (n - 2));
        let mut right = Vec::with_capacity(rows * (n - 2));
        let mut target = Vec::with_capacity(rows * (n - 2));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let r = pair_row(n, i, j);
                for k in (0..n).filter(|&k| k != i && k != j) {
                    left.push(pair_row(n, i, k));
                    right.push(pair_row(n, k, j));
                    target.push(r);
                }
            }
        }
        // Each edge is mapped by W_b once and reused by every walk through it.
        let mapped = tape.matmul_bt(edges.reps, transition)?;
        let first = tape.gather_rows(edges.reps, &left)?;
        let second = tape.gather_rows(mapped, &right)?;
        let gated = tape.mul(first, second)?;
        let combined = tape.sigmoid(gated);
        let summed = tape.scatter_add_rows(combined, &target, rows)?;
        let extended = tape.scale(summed, 1.0 - beta);
        tape.add(kept, extended)?
    };
    Ok(EdgeTensor {
        reps,
        entities: n,
        length: edges.length * 2,
    })
}

/// Applies [`walk_aggregate`] `log2(length)` times; `length` must be a
/// power of two and 1 returns the input unchanged.
pub fn aggregate_to_length(
    tape: &mut Tape<'_>,
    edges: EdgeTensor,
    length: usize,
    transition: Var,
    beta: f64,
) -> Result<EdgeTensor> {
    if !length.is_power_of_two() {
        return Err(Error::invalid(format!(
            "walk length {length} is not a power of two"
        )));
    }
    let mut current = edges;
    while current.length < length {
        current = walk_aggregate(tape, &current, transition, beta)?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn rows_enumerate_off_diagonal() {
        let n = 4;
        let mut seen = vec![false; n * (n - 1)];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let r = pair_row(n, i, j);
                    assert!(!seen[r]);
                    seen[r] = true;
                }
            }
        }
        assert!(seen.into_iter().all(|s| s));
        assert_eq!(pair_row(3, 0, 1), 0);
        assert_eq!(pair_row(3, 2, 1), 5);
    }

    #[test]
    fn combine_saturates_to_half_on_zero_inputs() {
        let mut tape = Tape::new();
        let zero = tape.input(Tensor::zeros(&[1, 3]));
        let v = tape.input(Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap());
        let w = tape.input(Tensor::filled(&[3, 3], 0.7));
        let out = walk_combine(&mut tape, zero, v, w).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5; 3]);

        let w0 = tape.input(Tensor::zeros(&[3, 3]));
        let out = walk_combine(&mut tape, v, v, w0).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5; 3]);
    }

    #[test]
    fn non_power_of_two_rejected() {
        let mut tape = Tape::new();
        let reps = tape.input(Tensor::zeros(&[6, 2]));
        let w = tape.input(Tensor::zeros(&[2, 2]));
        let e = EdgeTensor::new(reps, 3);
        assert!(aggregate_to_length(&mut tape, e, 3, w, 0.5).is_err());
    }

    #[test]
    fn length_schedule() {
        let mut tape = Tape::new();
        let reps = tape.input(Tensor::filled(&[6, 2], 0.3));
        let w = tape.input(Tensor::filled(&[2, 2], 0.1));
        let e = EdgeTensor::new(reps, 3);
        let before = tape.len();
        let same = aggregate_to_length(&mut tape, e.clone(), 1, w, 0.5).unwrap();
        assert_eq!(same.reps, reps);
        assert_eq!(tape.len(), before);
        let four = aggregate_to_length(&mut tape, e, 4, w, 0.5).unwrap();
        assert_eq!(four.length, 4);
        assert_eq!(tape.op_tags().iter().filter(|t| **t == "scatter_add_rows").count(), 2);
    }
}
