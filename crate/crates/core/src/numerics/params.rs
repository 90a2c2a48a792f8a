//! Named trainable tensors and their (possibly row-sparse) gradients.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Whether a parameter is a bias. Biases are excluded from L2 regularization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    kind: ParamKind,
    frozen: bool,
    tensor: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry {
            name,
            kind,
            frozen: false,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Copies gradients into the tensors' grad slots. Parameters the loss
    /// never reached get an all-zero slot.
    pub fn fill_grads(&mut self, grads: &ParamGrads) {
        for id in self.ids().collect::<Vec<_>>() {
            let dense = grads.dense(id, self.get(id).len());
            self.get_mut(id)
                .set_grad(dense)
                .expect("gradient length matches parameter");
        }
    }

    /// `self = self + (other - self) / count`, the incremental mean update.
    pub fn blend_mean(&mut self, other: &ParamStore, count: usize) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::invalid("parameter stores differ in layout"));
        }
        let k = count as f64;
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.tensor.shape() != theirs.tensor.shape() {
                return Err(Error::shape(
                    "blend_mean",
                    mine.tensor.shape(),
                    theirs.tensor.shape(),
                ));
            }
            for (a, b) in mine.tensor.data_mut().iter_mut().zip(theirs.tensor.data()) {
                *a += (b - *a) / k;
            }
        }
        Ok(())
    }
}

/// Gradient of one parameter: dense, or accumulated per row when the
/// parameter is only touched through row lookups (embedding tables).
#[derive(Clone, Debug, PartialEq)]
pub enum GradBuf {
    Dense(Vec<f64>),
    Rows {
        width: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    },
}

impl GradBuf {
    fn add_row(&mut self, row: usize, g: &[f64]) {
        match self {
            GradBuf::Dense(d) => {
                let w = g.len();
                for (a, b) in d[row * w..(row + 1) * w].iter_mut().zip(g) {
                    *a += b;
                }
            }
            GradBuf::Rows { rows, .. } => {
                let slot = rows.entry(row).or_insert_with(|| vec![0.0; g.len()]);
                for (a, b) in slot.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    fn to_dense_in_place(&mut self, len: usize) -> &mut Vec<f64> {
        if let GradBuf::Rows { width, rows } = self {
            let mut d = vec![0.0; len];
            for (r, g) in rows.iter() {
                d[r * *width..(r + 1) * *width].copy_from_slice(g);
            }
            *self = GradBuf::Dense(d);
        }
        match self {
            GradBuf::Dense(d) => d,
            GradBuf::Rows { .. } => unreachable!(),
        }
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            GradBuf::Dense(d) => vec![d.as_mut_slice()],
            GradBuf::Rows { rows, .. } => rows.values_mut().map(|v| v.as_mut_slice()).collect(),
        }
    }

    fn slices(&self) -> Vec<&[f64]> {
        match self {
            GradBuf::Dense(d) => vec![d.as_slice()],
            GradBuf::Rows { rows, .. } => rows.values().map(|v| v.as_slice()).collect(),
        }
    }
}

/// Gradients for every parameter of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    bufs: Vec<Option<GradBuf>>,
}

impl ParamGrads {
    pub fn new(n_params: usize) -> Self {
        ParamGrads {
            bufs: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&GradBuf> {
        self.bufs.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn add_dense(&mut self, id: ParamId, len: usize) -> &mut Vec<f64> {
        self.bufs[id.0]
            .get_or_insert_with(|| GradBuf::Dense(vec![0.0; len]))
            .to_dense_in_place(len)
    }

    pub(crate) fn add_row(&mut self, id: ParamId, width: usize, row: usize, g: &[f64]) {
        self.bufs[id.0]
            .get_or_insert_with(|| GradBuf::Rows {
                width,
                rows: BTreeMap::new(),
            })
            .add_row(row, g);
    }

    /// Dense copy of one parameter's gradient (zeros when unreached).
    pub fn dense(&self, id: ParamId, len: usize) -> Vec<f64> {
        match self.get(id) {
            None => vec![0.0; len],
            Some(GradBuf::Dense(d)) => d.clone(),
            Some(buf @ GradBuf::Rows { .. }) => buf.clone().to_dense_in_place(len).clone(),
        }
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &ParamGrads, store: &ParamStore) {
        if self.bufs.len() < other.bufs.len() {
            self.bufs.resize(other.bufs.len(), None);
        }
        for (i, theirs) in other.bufs.iter().enumerate() {
            let Some(theirs) = theirs else { continue };
            match (&mut self.bufs[i], theirs) {
                (slot @ None, t) => *slot = Some(t.clone()),
                (Some(mine), GradBuf::Rows { rows, .. }) => {
                    for (r, g) in rows {
                        mine.add_row(*r, g);
                    }
                }
                (Some(mine), GradBuf::Dense(d)) => {
                    let len = store.get(ParamId(i)).len();
                    for (a, b) in mine.to_dense_in_place(len).iter_mut().zip(d) {
                        *a += b;
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for buf in self.bufs.iter_mut().flatten() {
            for s in buf.slices_mut() {
                s.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.bufs
            .iter()
            .flatten()
            .flat_map(|b| b.slices())
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Mutable views over every stored gradient value.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.bufs
            .iter_mut()
            .flatten()
            .flat_map(|b| b.slices_mut())
            .collect()
    }
}
