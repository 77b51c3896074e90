#![allow(dead_code)]

use std::path::{Path, PathBuf};

use aquiflow::datagen::{generate_dataset, source_from_spec, GrfParams, SourceSpec, MANIFEST_NAME};
use aquiflow::fields::GridSpec;
use aquiflow::model::Architecture;
use aquiflow::train::{train, TrainConfig};

pub fn tiny_grid() -> GridSpec {
    GridSpec::new(16, 16, 125.0).unwrap()
}

pub fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 3,
        architecture: Architecture {
            in_channels: 2,
            hidden_channels: 6,
            layers: 3,
            embedding_dim: 4,
            activation: "silu".into(),
        },
        ..TrainConfig::default()
    }
}

/// Writes a 20-sample 16x16 dataset and a briefly trained model under
/// `dir`; returns (manifest, checkpoint).
pub fn tiny_pipeline(dir: &Path) -> (PathBuf, PathBuf) {
    let grid = tiny_grid();
    let data = dir.join("data");
    let spec = SourceSpec::desk_scale(&grid).unwrap();
    let source = source_from_spec(&grid, &spec).unwrap();
    let params = GrfParams {
        seed: 11,
        ..GrfParams::default()
    };
    generate_dataset(20, &params, &grid, &source, &data).unwrap();
    let manifest = data.join(MANIFEST_NAME);
    let ckpt = dir.join("tiny.ckpt");
    train(&tiny_train_config(), &manifest, &ckpt).unwrap();
    (manifest, ckpt)
}
