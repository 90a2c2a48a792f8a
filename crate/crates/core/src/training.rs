//! Mini-batch training with Adam, gradient clipping, dropout, L2 on
//! non-bias weights, dev-based early stopping and parameter averaging.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Sentence;
use crate::error::{Error, Result};
use crate::evaluation::{gold_decisions, micro_prf, to_decisions, DecisionSet, Prf};
use crate::model::{Model, PreparedSentence};
use crate::numerics::{Adam, AdamConfig, ParamGrads, ParamKind, ParamStore, Tape};

/// `coefficient * Σ w²` over every trainable non-bias parameter.
pub fn l2_penalty(store: &ParamStore, coefficient: f64) -> f64 {
    store
        .ids()
        .filter(|&id| store.kind(id) == ParamKind::Weight && !store.is_frozen(id))
        .map(|id| store.get(id).data().iter().map(|w| w * w).sum::<f64>())
        .sum::<f64>()
        * coefficient
}

/// Value and gradient of [`l2_penalty`], computed on a tape.
pub fn l2_with_gradient(store: &ParamStore, coefficient: f64) -> Result<(f64, ParamGrads)> {
    let mut tape = Tape::with_params(store);
    let mut terms = Vec::new();
    for id in store.ids() {
        if store.kind(id) == ParamKind::Weight && !store.is_frozen(id) {
            let p = tape.param(id);
            terms.push(tape.sum_squares(p));
        }
    }
    if terms.is_empty() || coefficient == 0.0 {
        return Ok((0.0, ParamGrads::new(store.len())));
    }
    let stacked = tape.concat_cols(&terms)?;
    let total = tape.sum(stacked);
    let loss = tape.scale(total, coefficient);
    let value = tape.value(loss).data()[0];
    Ok((value, tape.backward(loss)?.into_params()))
}

/// Loss of one batch and its parameter gradient. The data term is the
/// mean negative log-likelihood over every pair instance of the batch.
pub fn batch_loss_and_grad(
    model: &Model,
    batch: &[&PreparedSentence],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, ParamGrads)> {
    let total_pairs: usize = batch.iter().map(|p| p.pairs.len()).sum();
    if total_pairs == 0 {
        return Err(Error::invalid("batch has no entity pairs"));
    }
    let scale = 1.0 / total_pairs as f64;
    let mut grads = ParamGrads::new(model.store.len());
    let mut data = 0.0;
    for prep in batch {
        let mut tape = Tape::with_params(&model.store);
        let Some(loss) = model.sentence_loss(&mut tape, prep, scale, rng.as_deref_mut())? else {
            continue;
        };
        data += tape.value(loss).data()[0];
        grads.accumulate(tape.backward(loss)?.params(), &model.store);
    }
    let (penalty, l2_grads) = l2_with_gradient(&model.store, model.config.l2)?;
    grads.accumulate(&l2_grads, &model.store);
    Ok((data + penalty, grads))
}

/// Loss of a batch without dropout and without gradients.
pub fn batch_loss(model: &Model, batch: &[&PreparedSentence]) -> Result<f64> {
    let total_pairs: usize = batch.iter().map(|p| p.pairs.len()).sum();
    if total_pairs == 0 {
        return Err(Error::invalid("batch has no entity pairs"));
    }
    let mut data = 0.0;
    for prep in batch {
        let mut tape = Tape::with_params(&model.store);
        if let Some(loss) = model.sentence_loss::<ChaCha8Rng>(&mut tape, prep, 1.0 / total_pairs as f64, None)? {
            data += tape.value(loss).data()[0];
        }
    }
    Ok(data + l2_penalty(&model.store, model.config.l2))
}

/// Predicted decisions for a corpus using `params`.
pub fn predict_corpus_with(model: &Model, params: &ParamStore, corpus: &[Sentence]) -> Result<DecisionSet> {
    let types = model.vocab.labels().relation_types();
    let mut out = DecisionSet::new();
    for (k, s) in corpus.iter().enumerate() {
        let rels = model.extract_with(params, s)?;
        out.extend(to_decisions(k, s, &rels, types));
    }
    Ok(out)
}

pub fn predict_corpus(model: &Model, corpus: &[Sentence]) -> Result<DecisionSet> {
    predict_corpus_with(model, &model.store, corpus)
}

pub fn evaluate_with(model: &Model, params: &ParamStore, corpus: &[Sentence]) -> Result<Prf> {
    Ok(micro_prf(&gold_decisions(corpus), &predict_corpus_with(model, params, corpus)?))
}

pub fn evaluate(model: &Model, corpus: &[Sentence]) -> Result<Prf> {
    evaluate_with(model, &model.store, corpus)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    pub dev: Prf,
    pub improved: bool,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "epoch {:>3}  loss {:.6}  dev P {:.4} R {:.4} F1 {:.4}{}",
            self.epoch,
            self.train_loss,
            self.dev.precision,
            self.dev.recall,
            self.dev.f1,
            if self.improved { "  *" } else { "" }
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The model holding the selected (averaged, when enabled) parameters.
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev: Prf,
}

/// Trains `model` in place of its parameters and returns the selection.
///
/// Each epoch shuffles the sentences, runs one Adam step per batch, then
/// scores the dev set with the running mean of the epoch-end snapshots
/// (or the current parameters when averaging is off). Training stops once
/// `patience` epochs pass without a strict dev F1 improvement.
pub fn train(
    mut model: Model,
    train: &[Sentence],
    dev: &[Sentence],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::invalid("training and dev corpora must be non-empty"));
    }
    let cfg = model.config.clone();
    let prepared: Vec<PreparedSentence> = train
        .iter()
        .map(|s| model.prepare(s))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| !p.pairs.is_empty())
        .collect();
    if prepared.is_empty() {
        return Err(Error::invalid("no training sentence has two or more entities"));
    }
    let dev_gold = gold_decisions(dev);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(&model.store, AdamConfig::new(cfg.learning_rate));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut average: Option<ParamStore> = None;
    let mut best: Option<(ParamStore, usize, Prf)> = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut step = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&PreparedSentence> = chunk.iter().map(|&k| &prepared[k]).collect();
            let (loss, mut grads) = batch_loss_and_grad(&model, &batch, Some(&mut rng))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!("loss is {loss}"),
                });
            }
            grads
                .clip_global_norm(cfg.grad_clip)
                .map_err(|e| Error::Divergence {
                    epoch,
                    step,
                    detail: e.to_string(),
                })?;
            adam.step(&mut model.store, &grads).map_err(|e| Error::Divergence {
                epoch,
                step,
                detail: e.to_string(),
            })?;
            loss_sum += loss;
            batches += 1;
        }

        let scored = if cfg.average_params {
            match average.as_mut() {
                None => average = Some(model.store.clone()),
                Some(avg) => avg.blend_mean(&model.store, epoch)?,
            }
            average.as_ref().expect("set above")
        } else {
            &model.store
        };
        let pred = predict_corpus_with(&model, scored, dev)?;
        let dev_prf = micro_prf(&dev_gold, &pred);
        let improved = best.as_ref().is_none_or(|b| dev_prf.f1 > b.2.f1);
        if improved {
            best = Some((scored.clone(), epoch, dev_prf));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            dev: dev_prf,
            improved,
        };
        on_epoch(&entry);
        log.push(entry);
        if since_best >= cfg.patience {
            break;
        }
    }

    let (params, best_epoch, best_dev) = best.expect("at least one epoch runs");
    model.store = params;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_dev,
    })
}
