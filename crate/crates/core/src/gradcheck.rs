//! Central finite-difference verification of the full model's gradient.

use std::time::{Duration, Instant};

use crate::config::{Config, Preset};
use crate::dataset::{EntityMention, GoldRelation, Sentence, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, PreparedSentence};
use crate::numerics::{ParamGrads, ParamId};
use crate::training::{batch_loss, batch_loss_and_grad};

/// Step used for the central differences.
pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so that gradients that are
/// zero up to rounding compare by absolute error.
pub const FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradcheckDims {
    /// `n_e = 8, n_t = 4, n_p = 4, n_s = n_b = 8, l = 4`.
    Tiny,
    /// A little wider: `n_e = 12, n_t = 5, n_p = 5, n_s = n_b = 10, l = 8`.
    Small,
}

impl GradcheckDims {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(GradcheckDims::Tiny),
            "small" => Ok(GradcheckDims::Small),
            other => Err(Error::Config(format!("unknown gradcheck dims {other:?}"))),
        }
    }

    pub fn config(self, seed: u64) -> Config {
        let (lstm_dim, type_dim, position_dim, pair_dim, walk_length) = match self {
            GradcheckDims::Tiny => (8, 4, 4, 8, 4),
            GradcheckDims::Small => (12, 5, 5, 10, 8),
        };
        Config {
            word_dim: 6,
            type_dim,
            position_dim,
            lstm_dim,
            lstm_hidden: None,
            pair_dim,
            walk_length,
            beta: 0.6,
            input_dropout: 0.0,
            output_dropout: 0.0,
            l2: 1e-2,
            seed,
            ..Config::preset(Preset::L4)
        }
    }
}

/// A three-entity sentence with one multi-token mention and two relations.
pub fn tiny_sentence() -> Sentence {
    Sentence {
        tokens: "alice joined the acme corp in paris today"
            .split(' ')
            .map(String::from)
            .collect(),
        entities: vec![
            EntityMention::new("E0", 0, 1, "PER"),
            EntityMention::new("E1", 3, 5, "ORG"),
            EntityMention::new("E2", 6, 7, "GPE"),
        ],
        relations: vec![
            GoldRelation::new("E0", "E1", "MEMBER"),
            GoldRelation::new("E2", "E1", "LOCATED"),
        ],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub worst: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub worst: f64,
    pub worst_param: String,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.worst < tolerance
    }
}

/// Compares the analytic gradient of the training loss (data term plus
/// L2, dropout off) with central differences for every parameter entry.
pub fn check_model(model: &mut Model, batch: &[PreparedSentence]) -> Result<GradcheckReport> {
    let start = Instant::now();
    let refs: Vec<&PreparedSentence> = batch.iter().collect();
    let (_, grads): (f64, ParamGrads) = batch_loss_and_grad(model, &refs, None)?;
    let mut params = Vec::new();
    let (mut worst, mut worst_param) = (0.0f64, String::new());
    for id in model.store.ids().collect::<Vec<ParamId>>() {
        if model.store.is_frozen(id) {
            continue;
        }
        let len = model.store.get(id).len();
        let analytic = grads.dense(id, len);
        let mut param_worst = 0.0f64;
        for k in 0..len {
            let orig = model.store.get(id).data()[k];
            model.store.get_mut(id).data_mut()[k] = orig + STEP;
            let plus = batch_loss(model, &refs)?;
            model.store.get_mut(id).data_mut()[k] = orig - STEP;
            let minus = batch_loss(model, &refs)?;
            model.store.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            param_worst = param_worst.max(relative_error(analytic[k], numeric));
        }
        let name = model.store.name(id).to_string();
        if param_worst >= worst {
            worst = param_worst;
            worst_param = name.clone();
        }
        params.push(ParamCheck {
            name,
            checked: len,
            worst: param_worst,
        });
    }
    Ok(GradcheckReport {
        params,
        worst,
        worst_param,
        elapsed: start.elapsed(),
    })
}

/// Builds the reference model for `dims` and checks it.
pub fn gradcheck(seed: u64, dims: GradcheckDims) -> Result<GradcheckReport> {
    let sentence = tiny_sentence();
    let vocab = Vocabulary::build(std::slice::from_ref(&sentence), None);
    let mut model = Model::new(dims.config(seed), vocab, None)?;
    let prep = model.prepare(&sentence)?;
    check_model(&mut model, &[prep])
}
