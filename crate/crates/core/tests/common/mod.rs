#![allow(dead_code)]

use std::path::Path;

use viewfree::config::TrainConfig;
use viewfree::data::{generate_dataset, DatasetSpec};
use viewfree::model::ModelConfig;
use viewfree::tensor::Precision;

/// A model small enough to train in well under a second per epoch.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        branches: 2,
        level_points: [16, 8, 4],
        level_widths: [8, 8, 16],
        neighbors: [4, 4, 4],
        heads: 2,
        pos_hidden: 4,
        fusion_width: 16,
        decoder_width: 8,
        decoder_heads: 2,
        decoder_layers: 1,
        n_miss: 8,
        n_out: 40,
        ..ModelConfig::default()
    }
}

pub fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        model: tiny_model(),
        epochs,
        precision: Precision::Wide,
        ..TrainConfig::default()
    }
}

pub const TINY_TOML: &str = r#"
epochs = 3
precision = "wide"
checkpoint_every = 2

[model]
branches = 2
level_points = [16, 8, 4]
level_widths = [8, 8, 16]
neighbors = [4, 4, 4]
heads = 2
pos_hidden = 4
fusion_width = 16
decoder_width = 8
decoder_heads = 2
decoder_layers = 1
n_miss = 8
n_out = 40
"#;

/// Dataset of `shapes` shapes with 64 ground-truth and 32 partial points.
pub fn dataset(dir: &Path, shapes: usize) {
    let spec = DatasetSpec {
        shapes,
        points: 64,
        ..DatasetSpec::default()
    };
    generate_dataset(&spec.shape_specs().unwrap(), 0.5, dir).unwrap();
}
