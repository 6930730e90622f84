#![allow(dead_code)]

use std::sync::Arc;

use magnet::datagen::{build_dataset, Dataset, DatasetConfig};
use magnet::experts::ExpertRegistry;
use magnet::model::{MagnetModel, ModelConfig, TrainConfig};
use magnet_service::server::AppState;

pub fn registry_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/experts_2d.json")
}

pub fn registry() -> ExpertRegistry {
    ExpertRegistry::load(registry_path()).unwrap()
}

/// 2 users x 2 repetitions of the MTS-2D layout.
pub fn dataset(seed: u64) -> Dataset {
    let mut cfg = DatasetConfig::mts2d(10.0).unwrap();
    cfg.users = 2;
    cfg.females = 1;
    cfg.reps = 2;
    build_dataset(&cfg, seed).unwrap()
}

/// Model trained for two epochs so the weighting and adaptation heads are
/// no longer at their zero initialization.
pub fn model() -> MagnetModel {
    let ds = dataset(1);
    let (train, val) = ds.trials.split_at(96);
    let mut m = MagnetModel::new(ModelConfig::for_dim(2), registry(), 3).unwrap();
    let tc = TrainConfig { max_epochs: 2, patience: 2, batch_size: 16, ..TrainConfig::for_dim(2) };
    m.train(train, val, &tc).unwrap();
    m
}

pub fn state() -> Arc<AppState> {
    Arc::new(AppState::new(model(), Some("test".into())).unwrap())
}
