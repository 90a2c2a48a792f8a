//! Global-norm gradient clipping and Adam.

use super::params::{ParamGrads, ParamStore};
use crate::error::{Error, Result};

/// Rescales all gradients so that their joint L2 norm is at most
/// `threshold`. Returns the norm measured before clipping.
pub fn clip_gradients(grads: &mut [&mut [f64]], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!(
            "clip threshold must be positive, got {threshold}"
        )));
    }
    let mut sq = 0.0;
    for g in grads.iter() {
        for v in g.iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > threshold {
        let factor = threshold / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
    Ok(norm)
}

impl ParamGrads {
    pub fn clip_global_norm(&mut self, threshold: f64) -> Result<f64> {
        let mut slices = self.slices_mut();
        clip_gradients(&mut slices, threshold)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            config,
        }
    }

    /// One bias-corrected Adam update. Nothing is modified if any updated
    /// value would be non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
        }
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.t + 1;
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);

        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        let mut next = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let g = grads[i];
            let mi = b1 * self.m[i] + (1.0 - b1) * g;
            let vi = b2 * self.v[i] + (1.0 - b2) * g * g;
            let p = params[i] - lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("adam update at index {i}")));
            }
            m.push(mi);
            v.push(vi);
            next.push(p);
        }
        params.copy_from_slice(&next);
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(())
    }
}

/// Adam over every unfrozen tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Adam {
            states: store
                .ids()
                .map(|id| AdamState::new(store.get(id).len(), config))
                .collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            if store.is_frozen(id) {
                continue;
            }
            let len = store.get(id).len();
            let g = grads.dense(id, len);
            self.states[id.0]
                .step(store.get_mut(id).data_mut(), &g)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("{} ({m})", store.name(id))),
                    other => other,
                })?;
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.first().map(|s| s.t).unwrap_or(0)
    }
}
