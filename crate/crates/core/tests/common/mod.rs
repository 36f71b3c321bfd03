#![allow(dead_code)]

use medinject::datagen::{DataConfig, Dataset};
use medinject::federation::{ExperimentConfig, FederationConfig, Scope, Variant};

/// Rates that converge within ten rounds on the synthetic tasks.
pub fn desk_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        federation: FederationConfig {
            seed,
            local_lr: 3e-3,
            finetune_lr: 1e-3,
            foundation_lr: 3e-3,
            local_epochs: 2,
            public_epochs: 3,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub fn with(mut config: ExperimentConfig, scope: Scope, variant: Variant, rounds: usize) -> ExperimentConfig {
    config.federation.scope = scope;
    config.federation.variant = variant;
    config.federation.num_rounds = rounds;
    config
}

pub fn dataset(samples_per_task: usize, num_clients: usize, seed: u64) -> Dataset {
    let data = DataConfig {
        samples_per_task,
        ..Default::default()
    };
    Dataset::generate(&data, &Default::default(), num_clients, seed).unwrap()
}
