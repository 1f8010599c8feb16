#![allow(dead_code)]

use std::path::Path;

use collab_core::dataset::{Dataset, DatasetConfig};
use collab_core::nets::UNetConfig;
use collab_core::training::ExperimentConfig;

pub fn tiny_dataset(root: &Path) -> Dataset {
    let cfg = DatasetConfig {
        objects: 4,
        views: 2,
        resolution: 16,
        seed: 5,
        holdout_fraction: 0.25,
    };
    Dataset::generate(&cfg, root).unwrap()
}

pub fn tiny_unet() -> UNetConfig {
    UNetConfig {
        channel_mults: vec![1, 2],
        attention_levels: vec![false, true],
        ..Default::default()
    }
}

/// A few-step configuration matching [`tiny_dataset`].
pub fn tiny_experiment(ds: &Dataset) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data = ds.manifest.config.clone();
    cfg.diffusion.steps = 8;
    cfg.unet = tiny_unet();
    for lc in [&mut cfg.pretrain, &mut cfg.train, &mut cfg.vae_train] {
        lc.steps = 3;
        lc.batch_size = 2;
    }
    cfg.eval.samples = 2;
    cfg
}
