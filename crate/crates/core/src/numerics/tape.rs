//! Reverse-mode differentiation over a linear operation log.
//!
//! Every primitive appends one node whose inputs already exist, so the log is
//! topologically ordered by construction and backward is a single reverse
//! sweep. Parameters are referenced from a [`ParamStore`] without copying;
//! their gradients land in a [`ParamGrads`], row-sparse when a parameter is
//! only read through row lookups.

use rand::Rng;

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis along which softmax normalizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Each row sums to one.
    Rows,
    /// Each column sums to one.
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var, Axis),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    Reshape(Var),
    Dropout(Var, Vec<f64>),
    NllSum(Var, Vec<usize>),
    SumSquares(Var),
    Sum(Var),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::Mul(..) => "multiply",
            Op::Scale(..) => "scale",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax(..) => "softmax",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::ScatterAddRows(..) => "scatter_add_rows",
            Op::Reshape(_) => "reshape",
            Op::Dropout(..) => "dropout",
            Op::NllSum(..) => "nll_sum",
            Op::SumSquares(_) => "sum_squares",
            Op::Sum(_) => "sum",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::MatMulBt(a, b) | Op::Add(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::AddRowBias(a, b) => vec![*a, *b],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softmax(a, _)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::GatherRows(a, _)
            | Op::MeanRows(a, _)
            | Op::ScatterAddRows(a, _)
            | Op::Reshape(a)
            | Op::Dropout(a, _)
            | Op::NllSum(a, _)
            | Op::SumSquares(a)
            | Op::Sum(a) => vec![*a],
        }
    }
}

struct Node {
    /// `None` for parameter leaves, whose values live in the store.
    value: Option<Tensor>,
    op: Op,
}

/// Ordered record of the primitives evaluated during one forward pass.
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape with no parameter store; only [`Tape::input`] leaves.
    pub fn new() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation tags in recording order.
    pub fn op_tags(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.tag()).collect()
    }

    /// Input node indices of each recorded operation.
    pub fn op_inputs(&self) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .map(|n| n.op.inputs().into_iter().map(Var::index).collect())
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.expect("param node without store").get(*id),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (ta.dims2(), tb.dims2());
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (ta.dims2(), tb.dims2());
        if k != k2 {
            return Err(Error::shape("matmul_bt", ta.shape(), tb.shape()));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bd[j * k..(j + 1) * k]);
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b)))
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims2() != tb.dims2() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("multiply", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|x| x * factor).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Scale(a, factor))
    }

    /// Adds the vector `b` (length = cols of `a`) to every row of `a`.
    pub fn add_row_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (_, c) = ta.dims2();
        if tb.len() != c {
            return Err(Error::shape("add_row_bias", ta.shape(), tb.shape()));
        }
        let bd = tb.data();
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[i % c])
            .collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRowBias(a, b)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|&x| sigmoid(x)).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|x| x.tanh()).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Tanh(a))
    }

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Var {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let mut out = ta.data().to_vec();
        for lane in lanes(r, c, axis) {
            let xs: Vec<f64> = lane.iter().map(|&i| out[i]).collect();
            for (&i, y) in lane.iter().zip(softmax(&xs)) {
                out[i] = y;
            }
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Softmax(a, axis))
    }

    /// Horizontal concatenation; all parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::shape("concat", self.value(*first).shape(), t.shape()));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor::matrix(rows, total, out)?, Op::ConcatCols(parts.to_vec())))
    }

    /// Vertical stacking; all parts must have the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape("concat", self.value(*first).shape(), t.shape()));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor::matrix(rows, cols, out)?, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if len == 0 || start + len > c {
            return Err(Error::invalid(format!(
                "column slice {start}..{} of {c} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&ta.row(i)[start..start + len]);
        }
        Ok(self.push(Tensor::matrix(r, len, out)?, Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if len == 0 || start + len > r {
            return Err(Error::invalid(format!(
                "row slice {start}..{} of {r} rows",
                start + len
            )));
        }
        let out = ta.data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::matrix(len, c, out)?, Op::SliceRows(a, start)))
    }

    /// Row lookup: output row `t` is input row `indices[t]`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if indices.is_empty() {
            return Err(Error::invalid("gather of zero rows"));
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::invalid(format!("row {i} out of {r}")));
            }
            out.extend_from_slice(ta.row(i));
        }
        Ok(self.push(
            Tensor::matrix(indices.len(), c, out)?,
            Op::GatherRows(a, indices.to_vec()),
        ))
    }

    /// Mean of the listed rows as a `[1, cols]` matrix.
    pub fn mean_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if indices.is_empty() {
            return Err(Error::invalid("mean of zero rows"));
        }
        let mut out = vec![0.0; c];
        for &i in indices {
            if i >= r {
                return Err(Error::invalid(format!("row {i} out of {r}")));
            }
            for (o, x) in out.iter_mut().zip(ta.row(i)) {
                *o += x;
            }
        }
        let n = indices.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Ok(self.push(Tensor::matrix(1, c, out)?, Op::MeanRows(a, indices.to_vec())))
    }

    /// Segment sum: input row `t` is added into output row `targets[t]`.
    pub fn scatter_add_rows(&mut self, a: Var, targets: &[usize], out_rows: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if targets.len() != r {
            return Err(Error::invalid(format!(
                "{} scatter targets for {r} rows",
                targets.len()
            )));
        }
        let mut out = vec![0.0; out_rows * c];
        for (i, &t) in targets.iter().enumerate() {
            if t >= out_rows {
                return Err(Error::invalid(format!("scatter target {t} out of {out_rows}")));
            }
            for (o, x) in out[t * c..(t + 1) * c].iter_mut().zip(ta.row(i)) {
                *o += x;
            }
        }
        Ok(self.push(
            Tensor::matrix(out_rows, c, out)?,
            Op::ScatterAddRows(a, targets.to_vec()),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(shape.to_vec(), ta.data().to_vec())?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`. Identity when `train` is false.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        rng: &mut R,
        train: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout probability {rate} outside [0, 1)"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let ta = self.value(a);
        let mask: Vec<f64> = (0..ta.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out: Vec<f64> = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Dropout(a, mask)))
    }

    /// Sum over rows of `-log softmax(row)[target]`, via log-sum-exp.
    pub fn nll_sum(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (r, c) = t.dims2();
        if targets.len() != r {
            return Err(Error::invalid(format!("{} targets for {r} rows", targets.len())));
        }
        let mut total = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            if y >= c {
                return Err(Error::invalid(format!("target {y} out of {c} classes")));
            }
            let row = t.row(i);
            total += log_sum_exp(row) - row[y];
        }
        Ok(self.push(Tensor::scalar(total), Op::NllSum(logits, targets.to_vec())))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Propagates d`loss`/d(node) back to every node of the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let n_params = self.store.map(ParamStore::len).unwrap_or(0);
        let mut acc = Acc {
            tape: self,
            nodes: vec![None; self.nodes.len()],
            params: ParamGrads::new(n_params),
        };
        acc.nodes[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(go) = acc.nodes[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.backprop_node(node, idx, &go, &mut acc)?;
            acc.nodes[idx] = Some(go);
        }
        Ok(Gradients {
            nodes: acc.nodes,
            params: acc.params,
        })
    }

    fn backprop_node(&self, node: &Node, idx: usize, go: &[f64], acc: &mut Acc<'_, 'p>) -> Result<()> {
        let out = self.value(Var(idx));
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ((m, k), (_, n)) = (ta.dims2(), tb.dims2());
                // dA = G · Bᵀ
                let ga = acc.dense(*a);
                let bd = tb.data();
                for i in 0..m {
                    let gr = &go[i * n..(i + 1) * n];
                    for p in 0..k {
                        ga[i * k + p] += dot(gr, &bd[p * n..(p + 1) * n]);
                    }
                }
                // dB = Aᵀ · G
                let ad = ta.data();
                let gb = acc.dense(*b);
                for i in 0..m {
                    let gr = &go[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av != 0.0 {
                            axpy(av, gr, &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ((m, k), (n, _)) = (ta.dims2(), tb.dims2());
                let bd = tb.data();
                let ga = acc.dense(*a);
                for i in 0..m {
                    for j in 0..n {
                        let g = go[i * n + j];
                        if g != 0.0 {
                            axpy(g, &bd[j * k..(j + 1) * k], &mut ga[i * k..(i + 1) * k]);
                        }
                    }
                }
                let ad = ta.data();
                let gb = acc.dense(*b);
                for i in 0..m {
                    for j in 0..n {
                        let g = go[i * n + j];
                        if g != 0.0 {
                            axpy(g, &ad[i * k..(i + 1) * k], &mut gb[j * k..(j + 1) * k]);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                axpy(1.0, go, acc.dense(*a));
                axpy(1.0, go, acc.dense(*b));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let ga = acc.dense(*a);
                for ((g, o), y) in ga.iter_mut().zip(go).zip(bd) {
                    *g += o * y;
                }
                let gb = acc.dense(*b);
                for ((g, o), x) in gb.iter_mut().zip(go).zip(ad) {
                    *g += o * x;
                }
            }
            Op::Scale(a, f) => axpy(*f, go, acc.dense(*a)),
            Op::AddRowBias(a, b) => {
                axpy(1.0, go, acc.dense(*a));
                let c = self.value(*b).len();
                let gb = acc.dense(*b);
                for (i, g) in go.iter().enumerate() {
                    gb[i % c] += g;
                }
            }
            Op::Sigmoid(a) => {
                let ga = acc.dense(*a);
                for ((g, o), y) in ga.iter_mut().zip(go).zip(out.data()) {
                    *g += o * y * (1.0 - y);
                }
            }
            Op::Tanh(a) => {
                let ga = acc.dense(*a);
                for ((g, o), y) in ga.iter_mut().zip(go).zip(out.data()) {
                    *g += o * (1.0 - y * y);
                }
            }
            Op::Softmax(a, axis) => {
                let (r, c) = out.dims2();
                let y = out.data();
                let ga = acc.dense(*a);
                for lane in lanes(r, c, *axis) {
                    let s: f64 = lane.iter().map(|&i| go[i] * y[i]).sum();
                    for &i in &lane {
                        ga[i] += y[i] * (go[i] - s);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = out.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let gp = acc.dense(p);
                    for r in 0..rows {
                        axpy(
                            1.0,
                            &go[r * total + offset..r * total + offset + w],
                            &mut gp[r * w..(r + 1) * w],
                        );
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    axpy(1.0, &go[offset..offset + len], acc.dense(p));
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, len) = out.dims2();
                let c = self.value(*a).cols();
                let ga = acc.dense(*a);
                for i in 0..r {
                    axpy(
                        1.0,
                        &go[i * len..(i + 1) * len],
                        &mut ga[i * c + start..i * c + start + len],
                    );
                }
            }
            Op::SliceRows(a, start) => {
                let c = out.cols();
                let ga = acc.dense(*a);
                axpy(1.0, go, &mut ga[start * c..start * c + go.len()]);
            }
            Op::GatherRows(a, indices) => {
                let c = out.cols();
                for (t, &i) in indices.iter().enumerate() {
                    acc.add_row(*a, i, &go[t * c..(t + 1) * c]);
                }
            }
            Op::MeanRows(a, indices) => {
                let scaled: Vec<f64> = go.iter().map(|g| g / indices.len() as f64).collect();
                for &i in indices {
                    acc.add_row(*a, i, &scaled);
                }
            }
            Op::ScatterAddRows(a, targets) => {
                let c = out.cols();
                let ga = acc.dense(*a);
                for (i, &t) in targets.iter().enumerate() {
                    axpy(1.0, &go[t * c..(t + 1) * c], &mut ga[i * c..(i + 1) * c]);
                }
            }
            Op::Reshape(a) => axpy(1.0, go, acc.dense(*a)),
            Op::Dropout(a, mask) => {
                let ga = acc.dense(*a);
                for ((g, o), m) in ga.iter_mut().zip(go).zip(mask) {
                    *g += o * m;
                }
            }
            Op::NllSum(a, targets) => {
                let t = self.value(*a);
                let c = t.cols();
                let rows: Vec<Vec<f64>> = (0..targets.len()).map(|i| softmax(t.row(i))).collect();
                let ga = acc.dense(*a);
                for (i, (&y, p)) in targets.iter().zip(rows).enumerate() {
                    for (j, pj) in p.into_iter().enumerate() {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        ga[i * c + j] += go[0] * (pj - onehot);
                    }
                }
            }
            Op::SumSquares(a) => {
                let ad = self.value(*a).data();
                let ga = acc.dense(*a);
                for (g, x) in ga.iter_mut().zip(ad) {
                    *g += 2.0 * go[0] * x;
                }
            }
            Op::Sum(a) => {
                acc.dense(*a).iter_mut().for_each(|g| *g += go[0]);
            }
        }
        Ok(())
    }
}

struct Acc<'t, 'p> {
    tape: &'t Tape<'p>,
    nodes: Vec<Option<Vec<f64>>>,
    params: ParamGrads,
}

impl Acc<'_, '_> {
    fn dense(&mut self, v: Var) -> &mut [f64] {
        let len = self.tape.value(v).len();
        match self.tape.nodes[v.0].op {
            Op::Param(id) => self.params.add_dense(id, len),
            _ => self.nodes[v.0].get_or_insert_with(|| vec![0.0; len]),
        }
    }

    fn add_row(&mut self, v: Var, row: usize, g: &[f64]) {
        match self.tape.nodes[v.0].op {
            Op::Param(id) => self.params.add_row(id, g.len(), row, g),
            _ => {
                let w = g.len();
                let buf = self.dense(v);
                axpy(1.0, g, &mut buf[row * w..(row + 1) * w]);
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient with respect to a non-parameter node; zeros if unreachable.
    pub fn wrt(&self, tape: &Tape<'_>, v: Var) -> Vec<f64> {
        self.nodes
            .get(v.0)
            .and_then(Clone::clone)
            .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

fn lanes(r: usize, c: usize, axis: Axis) -> Vec<Vec<usize>> {
    match axis {
        Axis::Rows => (0..r).map(|i| (i * c..(i + 1) * c).collect()).collect(),
        Axis::Cols => (0..c).map(|j| (0..r).map(|i| i * c + j).collect()).collect(),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_projection() {
        let mut tape = Tape::new();
        let i2 = tape.input(t(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.input(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.input(t(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let v = tape.input(t(2, 1, &[5.0, 7.0]));
        let out = tape.matmul(p, v).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 0.0]);
        assert_eq!(tape.shape(out), &[2, 1]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, 7, 5);
        let b = random(&mut rng, 5, 3);
        let mut expected = vec![0.0; 21];
        for i in 0..7 {
            for j in 0..3 {
                for p in 0..5 {
                    expected[i * 3 + j] += a.get(i, p) * b.get(p, j);
                }
            }
        }
        let mut tape = Tape::new();
        let (va, vb) = (tape.input(a), tape.input(b));
        let out = tape.matmul(va, vb).unwrap();
        for (x, y) in tape.value(out).data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        match err {
            Error::Shape { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let z = tape.input(Tensor::zeros(&[4]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5; 4]);

        let u = tape.input(Tensor::zeros(&[3]));
        let p = tape.softmax(u, Axis::Rows);
        for v in tape.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let u = tape.input(Tensor::vector(vec![2f64.ln(), 0.0]).unwrap());
        let p = tape.softmax(u, Axis::Rows);
        let d = tape.value(p).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn binary_shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
        assert!(tape.concat_cols(&[a, b]).is_err());
    }

    #[test]
    fn dropout_rate_checked_and_identity_at_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let a = tape.input(Tensor::filled(&[3, 3], 2.0));
        assert!(tape.dropout(a, 1.0, &mut rng, true).is_err());
        assert!(tape.dropout(a, -0.1, &mut rng, true).is_err());
        let same = tape.dropout(a, 0.5, &mut rng, false).unwrap();
        assert_eq!(same, a);
        let d = tape.dropout(a, 0.5, &mut rng, true).unwrap();
        for v in tape.value(d).data() {
            assert!(*v == 0.0 || *v == 4.0);
        }
    }

    #[test]
    fn linear_and_constant_losses() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(1.7));
        let loss = tape.scale(x, 3.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&tape, x), vec![3.0]);

        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(1.7));
        let c = tape.input(Tensor::scalar(4.0));
        let _unused = tape.scale(x, 2.0);
        let g = tape.backward(c).unwrap();
        assert_eq!(g.wrt(&tape, x), vec![0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn record_is_topological() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::filled(&[2, 2], 0.3));
        let b = tape.tanh(a);
        let c = tape.mul(a, b).unwrap();
        let _ = tape.sum(c);
        for (i, inputs) in tape.op_inputs().iter().enumerate() {
            assert!(inputs.iter().all(|&j| j < i));
        }
        assert_eq!(tape.op_tags(), vec!["input", "tanh", "multiply", "sum"]);
    }

    #[test]
    fn param_gather_gradients_are_row_sparse() {
        let mut store = ParamStore::new();
        let table = store.add(
            "table",
            super::super::params::ParamKind::Weight,
            t(4, 2, &[1., 2., 3., 4., 5., 6., 7., 8.]),
        );
        let mut tape = Tape::with_params(&store);
        let p = tape.param(table);
        let rows = tape.gather_rows(p, &[2, 2, 0]).unwrap();
        let loss = tape.sum(rows);
        let g = tape.backward(loss).unwrap();
        assert_eq!(
            g.params().dense(table, 8),
            vec![1., 1., 0., 0., 2., 2., 0., 0.]
        );
    }
}
