#![allow(dead_code)]

use magnet::datagen::truth::ground_truth;
use magnet::datagen::{build_dataset, Dataset, DatasetConfig};
use magnet::experts::{ExpertRegistry, ExpertSpec, Provenance};

pub fn expert(id: &str) -> ExpertSpec {
    let params = ground_truth(id).unwrap();
    ExpertSpec { id: id.into(), dim: params.dim(), params, provenance: Provenance::default() }
}

/// Registry built directly from the generator's endpoint models.
pub fn registry(ids: &[&str]) -> ExpertRegistry {
    ExpertRegistry::new(ids.iter().map(|id| expert(id)).collect()).unwrap()
}

/// MTS-2D layout shrunk to `users` participants, `reps` repetitions and the
/// first `grid` sizes and speeds.
pub fn small_2d(users: usize, reps: usize, grid: usize, seed: u64) -> Dataset {
    let mut cfg = DatasetConfig::mts2d(10.0).unwrap();
    cfg.users = users;
    cfg.females = users.min(1);
    cfg.reps = reps;
    for sc in &mut cfg.scenarios {
        sc.sizes.truncate(grid);
        sc.speeds.truncate(grid);
    }
    build_dataset(&cfg, seed).unwrap()
}

pub fn small_3d(users: usize, reps: usize, grid: usize, seed: u64) -> Dataset {
    let mut cfg = DatasetConfig::mts3d(10.0).unwrap();
    cfg.users = users;
    cfg.females = users.min(1);
    cfg.reps = reps;
    for sc in &mut cfg.scenarios {
        sc.sizes.truncate(grid);
        sc.speeds.truncate(grid);
    }
    build_dataset(&cfg, seed).unwrap()
}

/// Overwrites a layer's weights and bias with uniform values in
/// `[-scale, scale]`.
pub fn randomize(store: &mut magnet::nn::ParamStore, layer: &magnet::nn::Linear, scale: f64, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for name in [layer.weight_name(), layer.bias_name()] {
        for x in store.get_mut(&name).unwrap().data_mut() {
            *x = rng.random_range(-scale..scale);
        }
    }
}

/// Model with non-zero weighting and adaptation heads.
pub fn active_model(registry: ExpertRegistry, seed: u64) -> magnet::model::MagnetModel {
    let mut m = magnet::model::MagnetModel::new(magnet::model::ModelConfig::for_dim(registry.dim()), registry, seed).unwrap();
    let (l3, out) = (m.nets.caw.l3.clone(), m.nets.adapt_out.clone());
    randomize(&mut m.store, &l3, 0.3, seed + 1);
    randomize(&mut m.store, &out, 0.1, seed + 2);
    m
}
