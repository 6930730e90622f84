//! Builds a reduced MTS-2D dataset, prints its layout and RMSA regimes and
//! writes it in the line-delimited record format.
//!
//! cargo run --example generate_dataset -- [out.jsonl]

use magnet::datagen::{build_dataset, DatasetConfig};
use magnet::eval::cluster_threshold;

fn main() -> magnet::Result<()> {
    let mut cfg = DatasetConfig::mts2d(10.0)?;
    cfg.users = 4;
    cfg.females = 2;
    let ds = build_dataset(&cfg, 7)?;
    println!("{}: {} trials, {}D, {} scenarios", ds.header.name, ds.trials.len(), ds.dim(), cfg.scenarios.len());

    let rmsa: Vec<f64> = ds.trials.iter().filter_map(|t| t.rmsa).collect();
    let rule = cluster_threshold(&rmsa)?;
    println!("RMSA clusters {:?}, G1/G2 threshold {:.3}", rule.centers.unwrap_or_default(), rule.threshold);

    let t = &ds.trials[0];
    println!(
        "trial {}: user {} ({:?}), {} targets, endpoint {:?}",
        t.trial_id,
        t.user.id,
        t.user.profile.gesture,
        t.targets.len(),
        t.endpoint
    );

    let out = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("mts2d_small.jsonl").display().to_string());
    ds.save(&out)?;
    println!("written to {out} (sha256 {})", ds.hash()?);
    Ok(())
}
