//! Generative dictionary core.
//!
//! Given a headword and a sentence that uses it, the pipeline in this crate
//! produces a definition specific to that usage:
//!
//! - [`corpus`]: canonical JSON-Lines definition datasets, word-disjoint splits
//!   and summary statistics.
//! - [`tokenizer`]: a byte-pair subword tokenizer with reserved language-prompt
//!   tokens and the `(word, [SEP], context)` input layout.
//! - [`model`]: a transformer encoder-decoder with token, position and segment
//!   embeddings, hand-derived gradients and a flat parameter buffer.
//! - [`training`]: the two-phase schedule (frozen-encoder warm-up, then full
//!   fine-tuning) with Adam and binary checkpoints.
//! - [`decoding`]: greedy and length-normalized beam search with output
//!   language control.
//! - [`router`]: query validation, named-entity short-circuit and mode dispatch.
//! - [`metrics`]: corpus BLEU, NIST and manual-score aggregation.

pub mod corpus;
pub mod decoding;
pub mod lang;
pub mod metrics;
pub mod model;
pub mod router;
pub mod tokenizer;
pub mod training;

pub use corpus::{Dataset, DatasetStats, DictEntry};
pub use decoding::{GenerationSpec, Strategy};
pub use lang::Lang;
pub use model::{ModelConfig, ModelParams};
pub use router::{DefinitionResult, Mode, QueryRequest, Router};
pub use tokenizer::{InputEncoding, SubwordTokenizer};
pub use training::{Checkpoint, Phase, TrainConfig};

