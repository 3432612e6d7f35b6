//! Shared fixtures for the criterion benchmarks.

use ncp_core::combinator::{Mode, Model, ModelConfig};
use ncp_core::stratify::{binarize, stratify_binary, stratify_multi, BinaryFactor};
use ncp_core::synth::{generate_corpus, CorpusSpec};
use ncp_core::{preprocess, StratifiedSample, SyntaxTree};

/// Preprocessed synthetic trees.
pub fn corpus(sentences: usize) -> Vec<SyntaxTree> {
    let spec = CorpusSpec {
        sentences,
        seed: 7,
        ..CorpusSpec::default()
    };
    generate_corpus(&spec).iter().filter_map(preprocess).collect()
}

pub fn samples(trees: &[SyntaxTree], mode: Mode) -> Vec<StratifiedSample> {
    trees
        .iter()
        .map(|t| match mode {
            Mode::Binary => stratify_binary(&binarize(t, BinaryFactor::Right)),
            Mode::Multi => stratify_multi(t),
        })
        .collect::<Result<_, _>>()
        .expect("synthetic trees stratify")
}

/// An untrained model of width `model_size` over `samples`' vocabularies.
pub fn model(samples: &[StratifiedSample], mode: Mode, model_size: usize) -> Model {
    let config = ModelConfig {
        mode,
        model_size,
        label_hidden: model_size,
        orientation_hidden: model_size / 2,
        chunk_hidden: model_size,
        context_depth: 2,
        ..ModelConfig::default()
    };
    Model::from_samples(config, samples, 1).expect("valid bench model")
}
