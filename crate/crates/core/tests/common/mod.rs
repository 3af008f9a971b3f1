#![allow(dead_code)]

pub mod oracles;

use klink_core::dataset::{group_consistent_embeddings, make_synthetic, SyntheticCorpus, SyntheticSpec};
use klink_core::train::{Experiment, TrainConfig, TrainData};
use klink_core::Embedder;

pub const SYNTHETIC_CONFIG: &str = include_str!("../../../../configs/synthetic.toml");

pub fn synthetic_config() -> TrainConfig {
    TrainConfig::from_toml(SYNTHETIC_CONFIG).expect("configs/synthetic.toml parses")
}

/// The default synthetic corpus, normalized with training statistics.
pub fn synthetic_data(spec: &SyntheticSpec) -> (SyntheticCorpus, TrainData) {
    let corpus = make_synthetic(spec).unwrap();
    let (split, _) = corpus.split.normalized().unwrap();
    let data = TrainData {
        split,
        task: corpus.task.clone(),
        category: corpus.category.clone(),
    };
    (corpus, data)
}

/// Group-consistent prompt embeddings with the configured fallback.
pub fn synthetic_embedder(config: &TrainConfig, corpus: &SyntheticCorpus, length: usize) -> Embedder {
    let patch_count = length / config.model.patch_size;
    let seed = config.knowledge.fallback_seed.unwrap();
    let table = group_consistent_embeddings(corpus, patch_count, config.knowledge.dim, seed);
    Embedder::new(Some(table), Some(seed), config.knowledge.dim).unwrap()
}

/// The synthetic experiment shrunk to `epochs` for fast checks.
pub fn short_experiment(epochs: usize) -> Experiment {
    let mut exp = synthetic_config().experiment();
    exp.settings.epochs = epochs;
    exp
}
