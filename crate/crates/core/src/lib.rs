//! Expert language models at toy scale.
//!
//! The crate trains per-task experts on a small decoder-only transformer,
//! either as residual adapters on a frozen base or as full fine-tunes,
//! indexes them in a library of instance embeddings, routes unseen tasks to
//! an expert by exact maximum inner product search with a majority vote, and
//! merges experts through weighted task-vector arithmetic.
//!
//! Modules:
//!
//! - [`params`]: named tensor sets, the binary parameter format, task vectors and merging.
//! - [`model`]: the transformer, its adapters, training and gradient checking.
//! - [`keys`]: text rendering of instances and the hashed n-gram embedder.
//! - [`library`]: the expert registry, the key library and routing.
//! - [`tuner`]: merge coefficient search and two-expert composition.
//! - [`eval`]: task files, rank classification, ROUGE-L and reports.
//! - [`synth`]: synthetic task families for small end-to-end experiments.

pub mod eval;
pub mod keys;
pub mod library;
pub mod model;
pub mod params;
pub mod synth;
pub mod tokenizer;
pub mod tuner;

pub use eval::{TaskInstance, TaskKind, TaskSet, Split};
pub use keys::{Embedder, EmbedderConfig, EmbeddingVector, TextFormat};
pub use library::{ExpertLibrary, ExpertRecord, Registry, RoutingDecision};
pub use model::{Model, ModelConfig, TokenSequence};
pub use params::{ParameterSet, TaskVector};
pub use tokenizer::Tokenizer;
