//! Corpus ingestion, vocabularies, pair enumeration and synthetic data.

pub mod corpus;
pub mod pairs;
pub mod synthetic;
pub mod vocab;

pub use corpus::{
    parse_corpus, parse_line, read_corpus, save_corpus, serialize_sentence, write_corpus, EntityMention,
    GoldRelation, Sentence,
};
pub use pairs::{
    clip_offset, generate_pairs, ordered_pairs, position_bucket, relative_position, PairInstance,
    FAR_OFFSET, MAX_OFFSET, POSITION_BUCKETS,
};
pub use synthetic::{
    generate_synthetic, generate_with_stats, CompositionRule, GeneratorSpec, RelationRule,
    RuleStats,
};
pub use vocab::{Direction, LabelSet, Vocabulary, NO_RELATION, NULL_TYPE_INDEX, UNK_INDEX};
