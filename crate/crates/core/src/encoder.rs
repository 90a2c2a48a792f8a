//! Single-layer bidirectional LSTM and mention averaging.

use rand::Rng;

use crate::embeddings::uniform_tensor;
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

pub const WEIGHT_INIT_RANGE: f64 = 0.08;

/// Weights of one LSTM direction. Gates are packed column-wise in the
/// order input, forget, cell candidate, output: `w_input` is
/// `input_dim x 4h`, `w_hidden` is `h x 4h`, `bias` is `4h`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmDirection {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Cell = 2,
    Output = 3,
}

impl LstmDirection {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w_input = store.add(
            format!("{prefix}.w_input"),
            ParamKind::Weight,
            uniform_tensor(&[input_dim, 4 * hidden], WEIGHT_INIT_RANGE, rng),
        );
        let w_hidden = store.add(
            format!("{prefix}.w_hidden"),
            ParamKind::Weight,
            uniform_tensor(&[hidden, 4 * hidden], WEIGHT_INIT_RANGE, rng),
        );
        let mut b = vec![0.0; 4 * hidden];
        let f = Gate::Forget as usize;
        b[f * hidden..(f + 1) * hidden].fill(1.0);
        let bias = store.add(
            format!("{prefix}.bias"),
            ParamKind::Bias,
            Tensor::vector(b).expect("positive hidden size"),
        );
        LstmDirection {
            w_input,
            w_hidden,
            bias,
        }
    }

    /// Hidden states for `x` read in the given order; zero initial state.
    /// Output rows follow `order`.
    fn run(&self, tape: &mut Tape<'_>, x: Var, order: &[usize], hidden: usize) -> Result<Vec<Var>> {
        let w_in = tape.param(self.w_input);
        let w_h = tape.param(self.w_hidden);
        let b = tape.param(self.bias);
        let projected = tape.matmul(x, w_in)?;
        let projected = tape.add_row_bias(projected, b)?;

        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        let mut out = Vec::with_capacity(order.len());
        for &t in order {
            let mut gates = tape.slice_rows(projected, t, 1)?;
            if let Some(h_prev) = h {
                let rec = tape.matmul(h_prev, w_h)?;
                gates = tape.add(gates, rec)?;
            }
            let gate = |tape: &mut Tape<'_>, g: Gate| tape.slice_cols(gates, g as usize * hidden, hidden);
            let i = gate(tape, Gate::Input)?;
            let i = tape.sigmoid(i);
            let f = gate(tape, Gate::Forget)?;
            let f = tape.sigmoid(f);
            let g = gate(tape, Gate::Cell)?;
            let g = tape.tanh(g);
            let o = gate(tape, Gate::Output)?;
            let o = tape.sigmoid(o);

            let write = tape.mul(i, g)?;
            let c_next = match c {
                Some(c_prev) => {
                    let keep = tape.mul(f, c_prev)?;
                    tape.add(keep, write)?
                }
                None => write,
            };
            let squashed = tape.tanh(c_next);
            let h_next = tape.mul(o, squashed)?;
            out.push(h_next);
            h = Some(h_next);
            c = Some(c_next);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiLstm {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
    pub input_dim: usize,
    /// Per-direction hidden size; outputs have `2 * hidden` columns.
    pub hidden: usize,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let forward = LstmDirection::new(store, "lstm.fwd", input_dim, hidden, rng);
        let backward = LstmDirection::new(store, "lstm.bwd", input_dim, hidden, rng);
        BiLstm {
            forward,
            backward,
            input_dim,
            hidden,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// `[T, input_dim]` word vectors to `[T, 2h]` rows `[h_fwd_t ; h_bwd_t]`.
    pub fn encode(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let steps = tape.value(x).rows();
        if steps == 0 {
            return Err(Error::invalid("cannot encode an empty sequence"));
        }
        let order: Vec<usize> = (0..steps).collect();
        let fwd = self.forward.run(tape, x, &order, self.hidden)?;
        let rev: Vec<usize> = order.iter().rev().copied().collect();
        let mut bwd = self.backward.run(tape, x, &rev, self.hidden)?;
        bwd.reverse();
        let fwd = tape.concat_rows(&fwd)?;
        let bwd = tape.concat_rows(&bwd)?;
        tape.concat_cols(&[fwd, bwd])
    }
}

/// Mean of the encoder rows covered by a mention span, as `[1, n_e]`.
pub fn entity_average(tape: &mut Tape<'_>, encoded: Var, span: std::ops::Range<usize>) -> Result<Var> {
    let rows: Vec<usize> = span.collect();
    tape.mean_rows(encoded, &rows)
}
