//! The full network: embeddings, BLSTM, edge layer, walk aggregation and
//! the directional classifier, plus per-sentence preprocessing.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classifier::{logits, resolve_directions, ClassifierParams, DirectedRelation, PairPrediction};
use crate::config::Config;
use crate::dataset::{generate_pairs, Sentence, Vocabulary, NULL_TYPE_INDEX};
use crate::edge::{
    attend, context_matrix, context_tokens, edge_representation, pair_entity_representations, EdgeDims,
    EdgeLayer, SentenceFeatures,
};
use crate::embeddings::EmbeddingTables;
use crate::encoder::{entity_average, BiLstm};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::walks::{aggregate_to_length, pair_row, EdgeTensor, WalkLayer};

/// Every layer width of a built model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub word: usize,
    pub types: usize,
    pub positions: usize,
    /// `n_e`
    pub lstm: usize,
    /// `n_d`
    pub context: usize,
    /// `n_m`
    pub concat: usize,
    /// `n_s = n_b`
    pub pair: usize,
    /// `n_r = 2r + 1`
    pub classes: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub embeddings: EmbeddingTables,
    pub encoder: BiLstm,
    pub edge: EdgeLayer,
    /// Absent when the walk length is 1.
    pub walk: Option<WalkLayer>,
    pub classifier: ClassifierParams,
    dims: Dims,
}

/// A sentence mapped to indices, with its pairs and context tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSentence {
    pub tokens: Vec<usize>,
    /// Type of the first mention covering each token, or the null type.
    pub token_types: Vec<usize>,
    pub entity_types: Vec<usize>,
    pub spans: Vec<Range<usize>>,
    pub anchors: Vec<usize>,
    /// Ordered pairs, head-major.
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<usize>,
    /// Context tokens of each pair.
    pub contexts: Vec<Vec<usize>>,
}

impl PreparedSentence {
    pub fn entity_count(&self) -> usize {
        self.spans.len()
    }
}

/// Values recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[P, n_r]`
    pub logits: Var,
    /// Edge representations `v(1)`, `[P, n_s]`.
    pub edges: Var,
    /// Final pair representations `v(l)`, `[P, n_b]`.
    pub pairs: Var,
    /// Attention weights per pair; `None` without context.
    pub attention: Vec<Option<Var>>,
}

impl Model {
    /// Builds and randomly initializes a model from `config.seed`.
    pub fn new(config: Config, vocab: Vocabulary, pretrained: Option<Tensor>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let embeddings = EmbeddingTables::new(
            &mut store,
            &vocab,
            config.word_dim,
            config.type_dim,
            config.position_dim,
            pretrained,
            &mut rng,
        )?;
        if config.freeze_words {
            store.set_frozen(embeddings.words, true);
        }
        let encoder = BiLstm::new(&mut store, config.word_dim, config.hidden(), &mut rng);
        let edge_dims = EdgeDims {
            lstm: encoder.output_dim(),
            types: config.type_dim,
            positions: config.position_dim,
            pair: config.pair_dim,
            use_context: config.use_context,
        };
        let edge = EdgeLayer::new(&mut store, edge_dims, &mut rng)?;
        let walk = if config.walk_length > 1 {
            Some(WalkLayer::new(&mut store, config.pair_dim, config.beta, &mut rng)?)
        } else {
            None
        };
        let classes = vocab.labels().len();
        let classifier = ClassifierParams::new(&mut store, config.pair_dim, classes, &mut rng)?;
        let dims = Dims {
            word: config.word_dim,
            types: config.type_dim,
            positions: config.position_dim,
            lstm: edge_dims.lstm,
            context: edge_dims.context(),
            concat: edge_dims.concat(),
            pair: config.pair_dim,
            classes,
        };
        let model = Model {
            config,
            vocab,
            store,
            embeddings,
            encoder,
            edge,
            walk,
            classifier,
            dims,
        };
        model.check_structure()?;
        Ok(model)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Checks every registered tensor against the derived widths.
    pub fn check_structure(&self) -> Result<()> {
        let d = self.dims;
        let mut expected: Vec<(crate::numerics::ParamId, Vec<usize>)> = vec![
            (self.embeddings.words, vec![self.vocab.word_count(), d.word]),
            (self.embeddings.types, vec![self.vocab.type_count(), d.types]),
            (self.embeddings.positions, vec![crate::dataset::POSITION_BUCKETS, d.positions]),
            (self.edge.attention, vec![d.context, 1]),
            (self.edge.projection, vec![d.concat, d.pair]),
            (self.classifier.weights, vec![d.pair, d.classes]),
            (self.classifier.bias, vec![d.classes]),
        ];
        let h = self.encoder.hidden;
        for dir in [&self.encoder.forward, &self.encoder.backward] {
            expected.push((dir.w_input, vec![d.word, 4 * h]));
            expected.push((dir.w_hidden, vec![h, 4 * h]));
            expected.push((dir.bias, vec![4 * h]));
        }
        if let Some(w) = &self.walk {
            expected.push((w.transition, vec![d.pair, d.pair]));
        }
        if d.lstm != 2 * h || d.context != d.lstm + d.types + 2 * d.positions {
            return Err(Error::Config("encoder and context widths disagree".into()));
        }
        if d.classes != self.vocab.labels().len() || d.classes.is_multiple_of(2) {
            return Err(Error::Config("class count disagrees with the label set".into()));
        }
        for (id, shape) in expected {
            let actual = self.store.get(id).shape();
            if actual != shape.as_slice() {
                return Err(Error::shape("model structure", actual, &shape));
            }
        }
        Ok(())
    }

    pub fn prepare(&self, sentence: &Sentence) -> Result<PreparedSentence> {
        sentence.validate()?;
        let tokens: Vec<usize> = sentence.tokens.iter().map(|w| self.vocab.word_id(w)).collect();
        let entity_types: Vec<usize> = sentence
            .entities
            .iter()
            .map(|e| self.vocab.type_id(&e.etype))
            .collect();
        let spans: Vec<Range<usize>> = sentence.entities.iter().map(|e| e.token_indices()).collect();
        let anchors = sentence.entities.iter().map(|e| e.anchor()).collect();
        let mut token_types = vec![NULL_TYPE_INDEX; tokens.len()];
        for (z, slot) in token_types.iter_mut().enumerate() {
            if let Some(k) = spans.iter().position(|s| s.contains(&z)) {
                *slot = entity_types[k];
            }
        }
        let instances = generate_pairs(0, sentence, self.vocab.labels());
        let pairs: Vec<(usize, usize)> = instances.iter().map(|p| (p.head, p.tail)).collect();
        let contexts = pairs
            .iter()
            .map(|&(i, j)| context_tokens(tokens.len(), &spans, i, j, self.config.exclude_all_mentions))
            .collect();
        Ok(PreparedSentence {
            tokens,
            token_types,
            entity_types,
            spans,
            anchors,
            labels: instances.iter().map(|p| p.label).collect(),
            pairs,
            contexts,
        })
    }

    /// Runs the network for every ordered pair of the sentence. Dropout is
    /// applied only when `rng` is given. Returns `None` for sentences with
    /// fewer than two entities.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        prep: &PreparedSentence,
        mut rng: Option<&mut R>,
    ) -> Result<Option<Forward>> {
        if prep.pairs.is_empty() {
            return Ok(None);
        }
        let cfg = &self.config;
        let mut words = self.embeddings.embed_sentence(tape, &prep.tokens)?;
        if let Some(r) = rng.as_deref_mut() {
            words = tape.dropout(words, cfg.input_dropout, r, true)?;
        }
        let encoded = self.encoder.encode(tape, words)?;
        let averages = prep
            .spans
            .iter()
            .map(|s| entity_average(tape, encoded, s.clone()))
            .collect::<Result<Vec<_>>>()?;
        let entities = tape.concat_rows(&averages)?;
        let entity_types = self.embeddings.embed_types(tape, &prep.entity_types)?;
        let token_types = self.embeddings.embed_types(tape, &prep.token_types)?;
        let feats = SentenceFeatures {
            encoded,
            entities,
            entity_types,
            token_types,
            anchors: prep.anchors.clone(),
        };
        let (heads, tails) = pair_entity_representations(tape, &feats, &self.embeddings, &prep.pairs)?;

        let mut attention = Vec::with_capacity(prep.pairs.len());
        let context = if cfg.use_context {
            let q = tape.param(self.edge.attention);
            let mut pooled = Vec::with_capacity(prep.pairs.len());
            for (&(i, j), tokens) in prep.pairs.iter().zip(&prep.contexts) {
                let ctx = context_matrix(tape, &feats, &self.embeddings, i, j, tokens)?;
                let att = attend(tape, ctx.as_ref(), q, self.dims.context)?;
                attention.push(att.weights);
                pooled.push(att.context);
            }
            Some(tape.concat_rows(&pooled)?)
        } else {
            attention.resize(prep.pairs.len(), None);
            None
        };
        let projection = tape.param(self.edge.projection);
        let edges = edge_representation(tape, heads, tails, context, projection)?;

        let mut pairs = match &self.walk {
            Some(w) => {
                let transition = tape.param(w.transition);
                let start = EdgeTensor::new(edges, prep.entity_count());
                aggregate_to_length(tape, start, cfg.walk_length, transition, w.beta)?.reps
            }
            None => edges,
        };
        if let Some(r) = rng {
            pairs = tape.dropout(pairs, cfg.output_dropout, r, true)?;
        }
        let w = tape.param(self.classifier.weights);
        let b = tape.param(self.classifier.bias);
        let logits = logits(tape, pairs, w, b)?;
        Ok(Some(Forward {
            logits,
            edges,
            pairs,
            attention,
        }))
    }

    /// Summed negative log-likelihood of the gold labels, scaled by `scale`.
    pub fn sentence_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        prep: &PreparedSentence,
        scale: f64,
        rng: Option<&mut R>,
    ) -> Result<Option<Var>> {
        let Some(out) = self.forward(tape, prep, rng)? else {
            return Ok(None);
        };
        let nll = tape.nll_sum(out.logits, &prep.labels)?;
        Ok(Some(tape.scale(nll, scale)))
    }

    /// Evaluation-mode predictions, one per ordered pair, using `params`
    /// in place of the model's own parameters.
    pub fn predict_with(&self, params: &ParamStore, prep: &PreparedSentence) -> Result<Vec<PairPrediction>> {
        let mut tape = Tape::with_params(params);
        let Some(out) = self.forward::<ChaCha8Rng>(&mut tape, prep, None)? else {
            return Ok(Vec::new());
        };
        let scores = tape.value(out.logits);
        Ok(prep
            .pairs
            .iter()
            .enumerate()
            .map(|(r, &(i, j))| PairPrediction::from_logits(i, j, scores.row(r)))
            .collect())
    }

    pub fn predict(&self, prep: &PreparedSentence) -> Result<Vec<PairPrediction>> {
        self.predict_with(&self.store, prep)
    }

    /// Reconciles the two predictions of every unordered pair into at most
    /// one directed relation, in `(i, j)`, `i < j` order.
    pub fn decode(&self, n_entities: usize, preds: &[PairPrediction]) -> Result<Vec<DirectedRelation>> {
        if preds.len() != n_entities * n_entities.saturating_sub(1) {
            return Err(Error::invalid(format!(
                "{} predictions for {n_entities} entities",
                preds.len()
            )));
        }
        let mut out = Vec::new();
        for i in 0..n_entities {
            for j in i + 1..n_entities {
                let p_ij = &preds[pair_row(n_entities, i, j)];
                let p_ji = &preds[pair_row(n_entities, j, i)];
                if let Some(d) = resolve_directions(p_ij, p_ji, self.vocab.labels())? {
                    out.push(d);
                }
            }
        }
        Ok(out)
    }

    /// Final relations of one sentence.
    pub fn extract_with(&self, params: &ParamStore, sentence: &Sentence) -> Result<Vec<DirectedRelation>> {
        let prep = self.prepare(sentence)?;
        let preds = self.predict_with(params, &prep)?;
        self.decode(prep.entity_count(), &preds)
    }

    pub fn extract(&self, sentence: &Sentence) -> Result<Vec<DirectedRelation>> {
        self.extract_with(&self.store, sentence)
    }
}
