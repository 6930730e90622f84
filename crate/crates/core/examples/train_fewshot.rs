//! Few-shot training: 10 trials per user and condition from a reduced
//! MTS-2D set, early stopping on the validation split, checkpoint on disk.
//!
//! cargo run --release --example train_fewshot

use magnet::datagen::{build_dataset, few_shot_subset, split_dataset, DatasetConfig, SplitConfig};
use magnet::experts::ExpertRegistry;
use magnet::model::{MagnetModel, ModelConfig, TrainConfig};

fn main() -> magnet::Result<()> {
    let mut cfg = DatasetConfig::mts2d(10.0)?;
    cfg.users = 4;
    cfg.females = 2;
    let ds = build_dataset(&cfg, 0)?;
    let split = split_dataset(&ds.trials, SplitConfig { test_per_cell: 16, val_per_cell: 8 }, 0)?;
    let shots = few_shot_subset(&ds.trials, &split.pool, 10, false, 0)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| ds.trials[i].clone()).collect::<Vec<_>>();
    let (train, val) = (pick(&shots), pick(&split.val));
    println!("train {} / val {} / test {}", train.len(), val.len(), split.test.len());

    let reg = ExpertRegistry::load(concat!(env!("CARGO_MANIFEST_DIR"), "/data/experts_2d.json"))?;
    let mut model = MagnetModel::new(ModelConfig::for_dim(2), reg, 0)?;
    let tc = TrainConfig { max_epochs: 15, patience: 5, ..TrainConfig::for_dim(2) };
    let log = model.train(&train, &val, &tc)?;
    for e in &log.epochs {
        println!("epoch {:2}  lr {:.2e}  train {:.4}  val {:.4}", e.epoch, e.lr, e.train_loss, e.val_loss);
    }
    println!("best epoch {} (val {:.4}), stopped early: {}", log.best_epoch, log.best_val_loss, log.stopped_early);

    let path = std::env::temp_dir().join("magnet_fewshot.ckpt");
    let ck = model.to_checkpoint(0, log.best_epoch)?;
    ck.save(&path)?;
    println!("checkpoint {} ({})", path.display(), ck.digest()?);
    Ok(())
}
