//! Walk-based relation extraction over sentence-level entity graphs.
//!
//! A sentence is encoded by a BLSTM, every ordered entity pair gets an
//! attention-pooled edge representation, walks between entities are
//! aggregated up to a fixed length, and each pair is classified into one
//! of `2r + 1` directional classes.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod edge;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod training;
pub mod walks;

pub use config::{Config, Preset};
pub use error::{Error, Result};
pub use model::Model;
