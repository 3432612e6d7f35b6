//! Neural combinatory constituency parsing.
//!
//! A sentence is parsed bottom-up, one layer at a time: every node of the
//! current layer is classified (tag, label, and an orientation or chunk
//! boundary), neighbours that agree are composed into the next layer, and
//! the finished layers are turned back into a tree.
//!
//! - [`treebank`]: bracketed trees, preprocessing, corpus splits.
//! - [`stratify`]: binarization and layering, plus corpus statistics.
//! - [`autodiff`]: tensors, reverse-mode gradients, layers, Adam, checkpoints.
//! - [`combinator`]: the parser network.
//! - [`recover`]: layers back to trees, with validity diagnostics.
//! - [`eval`]: bracket scoring, throughput, headedness.
//! - [`train`]: run configuration and the training loop.
//! - [`synth`]: synthetic treebanks for tests and demos.

pub mod autodiff;
pub mod combinator;
pub mod embeddings;
pub mod eval;
pub mod recover;
pub mod stratify;
pub mod synth;
pub mod train;
pub mod treebank;

pub use combinator::{ComposeVariant, Mode, Model, ModelConfig};
pub use embeddings::{load_embeddings, EmbeddingTable};
pub use eval::{corpus_score, EvalParams, Score};
pub use recover::{recover_tree, validate, ParseOutcome, Validity};
pub use stratify::{
    binarize, stratify_binary, stratify_multi, BinaryFactor, FactorPolicy, RelayLabels,
    StratifiedSample,
};
pub use train::{Dataset, RunConfig};
pub use treebank::{parse_brackets, preprocess, render_brackets, SyntaxTree};
