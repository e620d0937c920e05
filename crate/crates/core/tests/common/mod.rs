#![allow(dead_code)]

use colorsense::color::ColorSpace;
use colorsense::echelon::EchelonConfig;
use colorsense::engine::TrainConfig;
use colorsense::episodes::{DataSource, EpisodeSpec, SynthParams};
use colorsense::model::ModelConfig;

/// 8×8 images, widths 4/8/8/8, d = 8.
pub fn tiny_model(depth: usize) -> ModelConfig {
    ModelConfig {
        echelon: EchelonConfig {
            stage_widths: [4, 8, 8, 8],
            embed_dim: 8,
            ..EchelonConfig::default()
        },
        pattern_depth: depth,
        ..ModelConfig::default()
    }
}

/// T = 6: 2-way 1-shot 2-query on 8×8 images.
pub fn tiny_spec() -> EpisodeSpec {
    EpisodeSpec::new(2, 1, 2).with_image_size(8, 8)
}

/// Workstation-sized model used by the training-based checks.
pub fn desk_model(space: ColorSpace, depth: usize) -> ModelConfig {
    ModelConfig {
        color_space: space,
        echelon: EchelonConfig {
            stage_widths: [8, 16, 16, 16],
            embed_dim: 16,
            ..EchelonConfig::default()
        },
        pattern_depth: depth,
        ..ModelConfig::default()
    }
}

/// 5-way 1-shot 15-query on 16×16 images.
pub fn desk_spec() -> EpisodeSpec {
    EpisodeSpec::new(5, 1, 15).with_image_size(16, 16)
}

pub fn desk_source() -> DataSource {
    DataSource::Synthetic(SynthParams {
        palette_separation: 0.3,
        noise: 0.1,
    })
}

pub fn desk_train(iterations: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        seed,
        eval_every: 0,
        ..TrainConfig::default()
    }
}

pub fn synthetic() -> DataSource {
    DataSource::Synthetic(SynthParams::default())
}
