//! Fixtures shared by the criterion benchmarks under `benches/`.

use std::path::Path;

use ghnerf_core::model::Model;
use ghnerf_core::synthdata::{generate_dataset, Dataset, DatasetConfig};
use ghnerf_core::trainer::TrainConfig;

/// One training subject, two frames, default cameras and resolution.
pub fn dataset(dir: &Path) -> Dataset {
    let cfg = DatasetConfig {
        subjects: 1,
        held_out_subjects: 0,
        frames: 2,
        ..DatasetConfig::default()
    };
    generate_dataset(&cfg, dir).expect("benchmark dataset");
    Dataset::open(dir).expect("benchmark dataset")
}

/// Default training config pointed at `dir`.
pub fn train_config(dir: &Path) -> TrainConfig {
    TrainConfig {
        dataset: dir.to_path_buf(),
        ..TrainConfig::default()
    }
}

/// Freshly initialised default-size model for `dataset`.
pub fn model(dataset: &Dataset, dir: &Path) -> Model<f32> {
    let cfg = train_config(dir);
    Model::new(&cfg.resolved_model(dataset), cfg.seed).expect("default model")
}
