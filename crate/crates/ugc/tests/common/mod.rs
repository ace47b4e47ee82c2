#![allow(dead_code)]

use std::path::Path;

use ugc::config::RunConfig;
use ugc::data::{synth_generate, Dataset};
use ugc_core::{partition, DatasetPartition};

/// A configuration small enough for unit-speed training runs.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.space.image_size = 16;
    cfg.space.width_choices = vec![4, 8];
    cfg.space.trunk_blocks = 1;
    cfg.discriminator.ndf = 4;
    cfg.discriminator.n_layers = 2;
    cfg.extractor.channels = vec![4, 8, 8];
    cfg.stage1.total_steps = 200;
    cfg.stage1.checkpoint_every = 2;
    cfg.stage2.total_steps = 200;
    cfg.stage2.checkpoint_every = 2;
    cfg
}

/// Writes `n` 16-pixel pairs and partitions them.
pub fn tiny_data(root: &Path, n: usize, fraction: f64) -> (Dataset, DatasetPartition) {
    synth_generate(root, n, 16, 7).unwrap();
    let data = Dataset::load(root).unwrap();
    let part = partition(&data.ids(), fraction, 0).unwrap();
    (data, part)
}
