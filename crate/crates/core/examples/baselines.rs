//! Border, Distance and single-expert baselines on MTS-2D under two
//! seeds, with the aggregated table.
//!
//! cargo run --release --example baselines

use magnet::datagen::{build_dataset, DatasetConfig};
use magnet::eval::{run_benchmark, BenchmarkConfig};
use magnet::experts::ExpertRegistry;

fn main() -> magnet::Result<()> {
    let ds = build_dataset(&DatasetConfig::mts2d(10.0)?, 0)?;
    let reg = ExpertRegistry::load(concat!(env!("CARGO_MANIFEST_DIR"), "/data/experts_2d.json"))?;
    let mut cfg = BenchmarkConfig::for_dim(2);
    cfg.seeds = vec![0, 1];
    cfg.magnet = false;
    let report = run_benchmark(&ds, &reg, &cfg, None)?;
    println!("{}", report.to_markdown());
    for s in &report.meta.per_seed {
        if let (Some(id), Some(e1)) = (&s.matched_expert, s.matched_val_e1) {
            println!("seed {}: matched expert {id} (validation E@1 {e1:.4})", s.seed);
        }
    }
    Ok(())
}
