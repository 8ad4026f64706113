#![allow(dead_code)]

use midlevel_core::data::{gen_synthetic_domain_pair, Sample, SyntheticConfig};
use midlevel_core::pipeline::{synthetic_splits, PipelineConfig, SyntheticSplits};
use midlevel_core::train::TrainConfig;

pub fn small_pipeline(n_source: usize) -> PipelineConfig {
    PipelineConfig {
        data: SyntheticConfig {
            n_source,
            n_target_pool: n_source,
            n_target_test: n_source / 3,
            ..SyntheticConfig::default()
        },
        width: 4,
        ..PipelineConfig::default()
    }
}

pub fn splits(n_source: usize, seed: u64) -> (PipelineConfig, SyntheticSplits) {
    let cfg = small_pipeline(n_source);
    let s = synthetic_splits(&cfg, seed).unwrap();
    (cfg, s)
}

pub fn quick_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        milestones: vec![],
        patience: epochs,
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    }
}

pub fn labelled_source(n: usize, seed: u64) -> Vec<Sample> {
    let cfg = SyntheticConfig {
        n_source: n,
        n_target_pool: 1,
        n_target_test: 1,
        ..SyntheticConfig::default()
    };
    gen_synthetic_domain_pair(&cfg, seed).unwrap().source_samples()
}
