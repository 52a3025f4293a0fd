#![allow(dead_code)]

use std::path::Path;

use ghnerf_cli::Scene;
use ghnerf_core::encoder::EncoderConfig;
use ghnerf_core::field::FieldConfig;
use ghnerf_core::model::{Model, ModelConfig};
use ghnerf_core::rendering::SamplingConfig;
use ghnerf_core::synthdata::{generate_dataset, Dataset, DatasetConfig};
use ghnerf_core::trainer::TrainConfig;

pub fn small_dataset_config() -> DatasetConfig {
    DatasetConfig {
        subjects: 2,
        held_out_subjects: 1,
        frames: 1,
        cameras_on_ring: 4,
        held_out_cameras: 1,
        resolution: 16,
        ..DatasetConfig::default()
    }
}

pub fn small_dataset(dir: &Path) -> Dataset {
    generate_dataset(&small_dataset_config(), dir).unwrap();
    Dataset::open(dir).unwrap()
}

pub fn tiny_train_config(dataset: &Path) -> TrainConfig {
    TrainConfig {
        dataset: dataset.to_path_buf(),
        model: ModelConfig {
            encoder: EncoderConfig {
                channels: vec![4, 4],
                strides: vec![2, 1],
                rgb_skip: true,
            },
            human_encoder: EncoderConfig {
                channels: vec![3],
                strides: vec![1],
                rgb_skip: true,
            },
            field: FieldConfig {
                hidden: 8,
                pe_bands: 1,
                dir_bands: 1,
                depth_bands: 1,
                ..FieldConfig::default()
            },
            sampling: SamplingConfig {
                n_coarse: 6,
                n_fine: 3,
                ..SamplingConfig::default()
            },
            ..ModelConfig::default()
        },
        source_views: 2,
        rays: 16,
        patch_size: 2,
        steps: 3,
        checkpoint_every: 2,
        ..TrainConfig::default()
    }
}

pub fn scene_with(dir: &Path, edit: impl FnOnce(&mut ModelConfig)) -> Scene {
    let ds = small_dataset(dir);
    let mut cfg = tiny_train_config(dir);
    edit(&mut cfg.model);
    let model = Model::new(&cfg.resolved_model(&ds), 7).unwrap();
    let mut scene = Scene::new(model, ds);
    scene.source_views = 2;
    scene
}
