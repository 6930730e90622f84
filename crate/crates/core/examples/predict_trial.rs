//! Per-target prediction record: fused log-density, ranking, expert
//! weights and adapted expert moments. Uses the untrained model, which is
//! a uniform mixture of the unadapted experts, unless a checkpoint path is
//! given.
//!
//! cargo run --example predict_trial -- [model.ckpt]

use magnet::datagen::{build_dataset, DatasetConfig};
use magnet::experts::ExpertRegistry;
use magnet::model::{MagnetModel, ModelConfig};
use magnet::nn::Checkpoint;

fn main() -> magnet::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => MagnetModel::from_checkpoint(&Checkpoint::load(path)?)?,
        None => {
            let reg = ExpertRegistry::load(concat!(env!("CARGO_MANIFEST_DIR"), "/data/experts_2d.json"))?;
            MagnetModel::new(ModelConfig::for_dim(2), reg, 0)?
        }
    };
    let mut cfg = DatasetConfig::mts2d(10.0)?;
    cfg.users = 1;
    cfg.females = 1;
    cfg.reps = 1;
    let ds = build_dataset(&cfg, 11)?;
    let trial = &ds.trials[3];
    let p = model.predict(trial)?;
    println!("trial {}: intended target {}", p.trial_id, trial.intended_id().map_or("none".into(), |i| i.to_string()));
    if let Some(r) = trial.rmsa {
        println!("RMSA {r:.3}");
    }
    println!("experts {:?}", p.expert_ids);
    for &id in p.ranking.iter().take(5) {
        let j = p.target_ids.iter().position(|&t| t == id).expect("ranked id");
        let means: Vec<String> = p.adapted[j].iter().map(|a| format!("{:.1?}", a.mean)).collect();
        println!(
            "rank {}: target {id:2}  log p {:9.3}  weights {:.3?}  adapted means {}",
            p.rank_of(id).unwrap_or(0),
            p.log_density[j],
            p.weights[j],
            means.join(" ")
        );
    }
    Ok(())
}
