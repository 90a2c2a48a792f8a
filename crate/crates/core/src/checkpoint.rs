//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `WALKRECK` |
//! | 4     | format version (`u32`) |
//! | 8     | header length `H` (`u64`) |
//! | H     | UTF-8 JSON header: config, vocabulary, tensor directory |
//! | ...   | every tensor's values as `f64`, in directory order |
//!
//! Values are stored as raw IEEE-754 bits, so a save/load round trip is
//! bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dataset::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::ParamKind;

pub const MAGIC: &[u8; 8] = b"WALKRECK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: Config,
    pub vocab: Vocabulary,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &Model) -> Result<()> {
    let store = &model.store;
    let header = Header {
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        tensors: store
            .ids()
            .map(|id| TensorEntry {
                name: store.name(id).to_string(),
                kind: store.kind(id),
                shape: store.get(id).shape().to_vec(),
                frozen: store.is_frozen(id),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for id in store.ids() {
        for v in store.get(id).data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model)?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len))
        .map_err(|_| Error::Checkpoint("header too large".into()))?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let mut header: Header = serde_json::from_slice(&json)?;
    header.vocab.reindex();

    let mut model = Model::new(header.config, header.vocab, None)?;
    if header.tensors.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, model has {}",
            header.tensors.len(),
            model.store.len()
        )));
    }
    for entry in &header.tensors {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", entry.name)))?;
        let t = model.store.get_mut(id);
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::shape("checkpoint tensor", t.shape(), &entry.shape));
        }
        let mut buf = [0u8; 8];
        for v in t.data_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        model.store.set_frozen(id, entry.frozen);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(model)
}

pub fn save(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path.as_ref())?);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    read_checkpoint(std::io::BufReader::new(fs::File::open(path.as_ref())?))
}
