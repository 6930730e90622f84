//! Reduced benchmark: baselines, MAGNeT at 1 and 10 shots and the
//! single-neutral-expert ablation, one seed, reports written to disk.
//! The full protocol is five seeds and shots 1, 3, 5, 10 (see the
//! `acceptance` test target or `magnet train`).
//!
//! cargo run --release --example benchmark -- [out_dir]

use magnet::datagen::{build_dataset, DatasetConfig};
use magnet::eval::{run_benchmark, Ablation, BenchmarkConfig};
use magnet::experts::ExpertRegistry;

fn main() -> magnet::Result<()> {
    let ds = build_dataset(&DatasetConfig::mts2d(10.0)?, 0)?;
    let reg = ExpertRegistry::load(concat!(env!("CARGO_MANIFEST_DIR"), "/data/experts_2d.json"))?;
    let mut cfg = BenchmarkConfig::for_dim(2);
    cfg.seeds = vec![0];
    cfg.shots = vec![1, 10];
    cfg.ablations = vec![Ablation::All];
    let out = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("magnet_benchmark").display().to_string());
    let report = run_benchmark(&ds, &reg, &cfg, Some(std::path::Path::new(&out).join("checkpoints").as_path()))?;
    report.write_dir(&out)?;
    println!("{}", report.to_markdown());
    println!("reports and checkpoints in {out}");
    Ok(())
}
