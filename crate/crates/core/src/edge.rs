//! Edge (one-length walk) representations for ordered entity pairs.
//!
//! Each target entity is `[e ; t ; p]` (mention average, type embedding,
//! position relative to the other target). Context words not covered by
//! either target are laid out one per row as `[e_z ; t_z ; p_zi ; p_zj]`,
//! pooled by attention, and the concatenation `[v_i ; v_j ; c_ij]` is
//! projected by `W_s` without bias.

use rand::Rng;

use crate::dataset::relative_position;
use crate::embeddings::{uniform_tensor, EmbeddingTables};
use crate::error::{Error, Result};
use crate::numerics::{Axis, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

/// Layer widths of the edge stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeDims {
    pub lstm: usize,
    pub types: usize,
    pub positions: usize,
    pub pair: usize,
    pub use_context: bool,
}

impl EdgeDims {
    /// Width of `v_i`: `n_e + n_t + n_p`.
    pub fn entity(&self) -> usize {
        self.lstm + self.types + self.positions
    }

    /// Width of a context row and of `q`: `n_d = n_e + n_t + 2 n_p`.
    pub fn context(&self) -> usize {
        self.lstm + self.types + 2 * self.positions
    }

    /// Width of the projected concatenation, `n_m`.
    pub fn concat(&self) -> usize {
        if self.use_context {
            2 * self.entity() + self.context()
        } else {
            2 * self.entity()
        }
    }
}

/// Glorot-uniform initialization for dense layers.
pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let range = (6.0 / (rows + cols) as f64).sqrt();
    uniform_tensor(&[rows, cols], range, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeLayer {
    /// Attention vector `q`, stored as `[n_d, 1]`.
    pub attention: ParamId,
    /// `W_s`, stored as `[n_m, n_s]`.
    pub projection: ParamId,
    pub dims: EdgeDims,
}

impl EdgeLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dims: EdgeDims, rng: &mut R) -> Result<Self> {
        if dims.pair >= dims.concat() {
            return Err(Error::Config(format!(
                "pair dimension {} must be smaller than the concatenated width {}",
                dims.pair,
                dims.concat()
            )));
        }
        let attention = store.add("edge.attention", ParamKind::Weight, glorot(dims.context(), 1, rng));
        let projection = store.add(
            "edge.projection",
            ParamKind::Weight,
            glorot(dims.concat(), dims.pair, rng),
        );
        Ok(EdgeLayer {
            attention,
            projection,
            dims,
        })
    }
}

/// Pair-independent sentence features shared by every pair.
#[derive(Clone, Debug)]
pub struct SentenceFeatures {
    /// BLSTM output, `[T, n_e]`.
    pub encoded: Var,
    /// Mention averages, `[n, n_e]`.
    pub entities: Var,
    /// Entity type embeddings, `[n, n_t]`.
    pub entity_types: Var,
    /// Per-token type embeddings (null type outside mentions), `[T, n_t]`.
    pub token_types: Var,
    /// Position anchor token of each entity.
    pub anchors: Vec<usize>,
}

/// `v_i` and `v_j` for every listed ordered pair, stacked as `[P, n_e+n_t+n_p]`.
pub fn pair_entity_representations(
    tape: &mut Tape<'_>,
    feats: &SentenceFeatures,
    tables: &EmbeddingTables,
    pairs: &[(usize, usize)],
) -> Result<(Var, Var)> {
    let side = |tape: &mut Tape<'_>, pick: fn(&(usize, usize)) -> (usize, usize)| -> Result<Var> {
        let (own, other): (Vec<usize>, Vec<usize>) = pairs.iter().map(pick).unzip();
        let offsets: Vec<i64> = own
            .iter()
            .zip(&other)
            .map(|(&a, &b)| relative_position(feats.anchors[a], feats.anchors[b]))
            .collect();
        let e = tape.gather_rows(feats.entities, &own)?;
        let t = tape.gather_rows(feats.entity_types, &own)?;
        let p = tables.embed_positions(tape, &offsets)?;
        tape.concat_cols(&[e, t, p])
    };
    let heads = side(tape, |&(i, j)| (i, j))?;
    let tails = side(tape, |&(i, j)| (j, i))?;
    Ok((heads, tails))
}

/// Context rows of one pair: `[m, n_d]`, one row per context token.
#[derive(Clone, Debug)]
pub struct ContextMatrix {
    pub rows: Var,
    pub tokens: Vec<usize>,
}

/// Tokens that are context for the pair `(head, tail)`: everything outside
/// the two target spans, or outside every span when `exclude_all` is set.
pub fn context_tokens(
    n_tokens: usize,
    spans: &[std::ops::Range<usize>],
    head: usize,
    tail: usize,
    exclude_all: bool,
) -> Vec<usize> {
    (0..n_tokens)
        .filter(|z| {
            if exclude_all {
                !spans.iter().any(|s| s.contains(z))
            } else {
                !spans[head].contains(z) && !spans[tail].contains(z)
            }
        })
        .collect()
}

/// `None` when the pair has no context tokens.
pub fn context_matrix(
    tape: &mut Tape<'_>,
    feats: &SentenceFeatures,
    tables: &EmbeddingTables,
    head: usize,
    tail: usize,
    tokens: &[usize],
) -> Result<Option<ContextMatrix>> {
    if tokens.is_empty() {
        return Ok(None);
    }
    let to_head: Vec<i64> = tokens
        .iter()
        .map(|&z| relative_position(z, feats.anchors[head]))
        .collect();
    let to_tail: Vec<i64> = tokens
        .iter()
        .map(|&z| relative_position(z, feats.anchors[tail]))
        .collect();
    let e = tape.gather_rows(feats.encoded, tokens)?;
    let t = tape.gather_rows(feats.token_types, tokens)?;
    let pi = tables.embed_positions(tape, &to_head)?;
    let pj = tables.embed_positions(tape, &to_tail)?;
    let rows = tape.concat_cols(&[e, t, pi, pj])?;
    Ok(Some(ContextMatrix {
        rows,
        tokens: tokens.to_vec(),
    }))
}

#[derive(Clone, Debug)]
pub struct Attention {
    /// Weights over context rows, `[m, 1]`; `None` when `m = 0`.
    pub weights: Option<Var>,
    /// Pooled context `c_ij`, `[1, n_d]`.
    pub context: Var,
}

/// `u = tanh(C) q`, `alpha = softmax(u)`, `c = alpha^T C`. Scores use the
/// squashed rows but the pooled vector averages the raw rows.
pub fn attend(
    tape: &mut Tape<'_>,
    ctx: Option<&ContextMatrix>,
    q: Var,
    context_dim: usize,
) -> Result<Attention> {
    let Some(ctx) = ctx else {
        let zero = tape.input(Tensor::zeros(&[1, context_dim]));
        return Ok(Attention {
            weights: None,
            context: zero,
        });
    };
    let m = ctx.tokens.len();
    let squashed = tape.tanh(ctx.rows);
    let scores = tape.matmul(squashed, q)?;
    let alpha = tape.softmax(scores, Axis::Cols);
    let alpha_row = tape.reshape(alpha, &[1, m])?;
    let context = tape.matmul(alpha_row, ctx.rows)?;
    Ok(Attention {
        weights: Some(alpha),
        context,
    })
}

/// `v(1) = [v_i ; v_j ; c] W_s` for stacked pairs; `context` is omitted in
/// the entity-only configuration.
pub fn edge_representation(
    tape: &mut Tape<'_>,
    heads: Var,
    tails: Var,
    context: Option<Var>,
    projection: Var,
) -> Result<Var> {
    let concat = match context {
        Some(c) => tape.concat_cols(&[heads, tails, c])?,
        None => tape.concat_cols(&[heads, tails])?,
    };
    tape.matmul(concat, projection)
}
