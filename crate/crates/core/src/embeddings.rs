//! Word, entity-type and relative-position lookup tables.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use crate::dataset::{position_bucket, Vocabulary, POSITION_BUCKETS};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

/// Half-width of the uniform range for randomly initialized rows.
pub const INIT_RANGE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables {
    pub words: ParamId,
    pub types: ParamId,
    pub positions: ParamId,
    pub word_dim: usize,
    pub type_dim: usize,
    pub position_dim: usize,
}

pub fn uniform_tensor<R: Rng + ?Sized>(shape: &[usize], range: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-range..=range)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

impl EmbeddingTables {
    /// Registers the three tables in `store`. When `pretrained` is given it
    /// replaces the random word table and must be `|V| x word_dim`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab: &Vocabulary,
        word_dim: usize,
        type_dim: usize,
        position_dim: usize,
        pretrained: Option<Tensor>,
        rng: &mut R,
    ) -> Result<Self> {
        let word_shape = [vocab.word_count(), word_dim];
        let word_table = uniform_tensor(&word_shape, INIT_RANGE, rng);
        let word_table = match pretrained {
            Some(t) if t.shape() != word_shape => {
                return Err(Error::shape("pretrained word table", t.shape(), &word_shape))
            }
            Some(t) => t,
            None => word_table,
        };
        let words = store.add("embed.words", ParamKind::Weight, word_table);
        let types = store.add(
            "embed.types",
            ParamKind::Weight,
            uniform_tensor(&[vocab.type_count(), type_dim], INIT_RANGE, rng),
        );
        let positions = store.add(
            "embed.positions",
            ParamKind::Weight,
            uniform_tensor(&[POSITION_BUCKETS, position_dim], INIT_RANGE, rng),
        );
        Ok(EmbeddingTables {
            words,
            types,
            positions,
            word_dim,
            type_dim,
            position_dim,
        })
    }

    /// One `word_dim` row per token id.
    pub fn embed_sentence(&self, tape: &mut Tape<'_>, token_ids: &[usize]) -> Result<Var> {
        let table = tape.param(self.words);
        tape.gather_rows(table, token_ids)
    }

    pub fn embed_types(&self, tape: &mut Tape<'_>, type_ids: &[usize]) -> Result<Var> {
        let table = tape.param(self.types);
        tape.gather_rows(table, type_ids)
    }

    /// One `position_dim` row per offset, through the clipped buckets.
    pub fn embed_positions(&self, tape: &mut Tape<'_>, offsets: &[i64]) -> Result<Var> {
        let buckets: Vec<usize> = offsets.iter().map(|&o| position_bucket(o)).collect();
        let table = tape.param(self.positions);
        tape.gather_rows(table, &buckets)
    }

    pub fn embed_position(&self, tape: &mut Tape<'_>, offset: i64) -> Result<Var> {
        self.embed_positions(tape, &[offset])
    }
}

/// Word table built from a pretrained vector file.
#[derive(Clone, Debug)]
pub struct PretrainedWords {
    pub table: Tensor,
    /// Vocabulary words (excluding PAD and UNK) found in the file.
    pub found: usize,
    /// `found` over the number of vocabulary words excluding PAD and UNK.
    pub coverage: f64,
}

/// Reads every `word v1 ... vD` line of a vector file. All lines must have
/// the same dimension.
pub fn read_vectors(path: impl AsRef<Path>) -> Result<(usize, HashMap<String, Vec<f64>>)> {
    let reader = BufReader::new(fs::File::open(path.as_ref())?);
    let mut dim = None;
    let mut out = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected {d} values, found {}", values.len()),
                })
            }
            _ => {}
        }
        out.insert(word.to_string(), values);
    }
    Ok((dim.unwrap_or(0), out))
}

/// Initializes the word table from a vector file; words missing from the
/// file keep a uniform random row.
pub fn load_pretrained<R: Rng + ?Sized>(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    word_dim: usize,
    rng: &mut R,
) -> Result<PretrainedWords> {
    let (dim, vectors) = read_vectors(path)?;
    if !vectors.is_empty() && dim != word_dim {
        return Err(Error::invalid(format!(
            "pretrained vectors have dimension {dim}, model expects {word_dim}"
        )));
    }
    let mut table = uniform_tensor(&[vocab.word_count(), word_dim], INIT_RANGE, rng);
    let mut found = 0;
    for (i, w) in vocab.words().iter().enumerate().skip(2) {
        if let Some(v) = vectors.get(w) {
            table.row_mut(i).copy_from_slice(v);
            found += 1;
        }
    }
    let total = vocab.word_count().saturating_sub(2);
    Ok(PretrainedWords {
        table,
        found,
        coverage: if total == 0 { 0.0 } else { found as f64 / total as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{EntityMention, Sentence};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn vocab(words: &[&str]) -> Vocabulary {
        let s = Sentence {
            tokens: words.iter().map(|w| w.to_string()).collect(),
            entities: vec![EntityMention::new("T1", 0, 1, "PER")],
            relations: vec![],
        };
        Vocabulary::build(&[s], None)
    }

    #[test]
    fn lookup_rows() {
        let v = vocab(&["cat", "dog"]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let tables = EmbeddingTables::new(&mut store, &v, 3, 2, 4, None, &mut rng).unwrap();
        let mut tape = Tape::with_params(&store);
        let ids = [v.word_id("dog"), v.word_id("zebra")];
        let e = tables.embed_sentence(&mut tape, &ids).unwrap();
        let words = store.get(tables.words);
        assert_eq!(tape.value(e).row(0), words.row(v.word_id("dog")));
        assert_eq!(tape.value(e).row(1), words.row(crate::dataset::UNK_INDEX));

        let far = tables.embed_positions(&mut tape, &[61, 500, 0]).unwrap();
        assert_eq!(tape.value(far).row(0), tape.value(far).row(1));
        assert_eq!(tape.value(far).row(2), store.get(tables.positions).row(61));
    }

    #[test]
    fn pretrained_rows_and_coverage() {
        let v = vocab(&["cat", "dog", "emu"]);
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "cat 0.5 -1 2").unwrap();
        writeln!(f, "yak 1 1 1").unwrap();
        f.flush().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = load_pretrained(f.path(), &v, 3, &mut rng).unwrap();
        assert_eq!(p.table.row(v.word_id("cat")), &[0.5, -1.0, 2.0]);
        assert_eq!(p.found, 1);
        assert!((p.coverage - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn inconsistent_dimensions_rejected() {
        let v = vocab(&["cat"]);
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "cat 1 2 3").unwrap();
        writeln!(f, "dog 1 2").unwrap();
        f.flush().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(load_pretrained(f.path(), &v, 3, &mut rng).is_err());
    }

    #[test]
    fn no_overlap_keeps_random_rows() {
        let v = vocab(&["cat"]);
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "yak 1 2").unwrap();
        f.flush().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = load_pretrained(f.path(), &v, 2, &mut rng).unwrap();
        assert_eq!(p.found, 0);
        assert!(p.table.is_finite());
        assert!(p.table.data().iter().all(|x| x.abs() <= INIT_RANGE));
    }
}
