//! Vibration regimes: RMSA of smooth and rough windows, the clustered
//! G1/G2 threshold, and per-regime Distance-baseline error.
//!
//! cargo run --example regime_grouping

use magnet::datagen::{build_dataset, simulate_motion_window, DatasetConfig, VibrationProfile};
use magnet::eval::{baseline_predict, cluster_threshold, grouped_errors, rmsa, Baseline, GroupingRule, Outcome};

fn main() -> magnet::Result<()> {
    for (name, profile) in [("smooth", VibrationProfile::smooth(10.0)), ("rough", VibrationProfile::rough(10.0))] {
        let r: Vec<f64> = (0..5).map(|s| simulate_motion_window(&profile, s).and_then(|w| rmsa(&w.acc))).collect::<magnet::Result<_>>()?;
        println!("{name:6} RMSA over 5 windows: {r:.3?}");
    }
    let mut cfg = DatasetConfig::mts2d(10.0)?;
    cfg.users = 4;
    cfg.females = 2;
    let ds = build_dataset(&cfg, 3)?;
    let values: Vec<f64> = ds.trials.iter().filter_map(|t| t.rmsa).collect();
    let cluster = cluster_threshold(&values)?;
    let mean = GroupingRule::mean_rule(&values)?;
    if let Some([lo, hi]) = cluster.centers.as_deref() {
        println!("cluster centers {lo:.3} and {hi:.3}");
    }
    println!("cluster threshold {:.3}, mean threshold {:.3}", cluster.threshold, mean.threshold);

    let outcomes: Vec<Outcome> = ds
        .trials
        .iter()
        .map(|t| Outcome::new(t, baseline_predict(&Baseline::Distance, t, None)?))
        .collect::<magnet::Result<_>>()?;
    for (label, rule) in [("clustered", &cluster), ("mean", &mean)] {
        let g = grouped_errors(&outcomes, rule)?;
        println!("Distance E@1 by {label} rule: G1 {}  G2 {}", fmt(g.g1), fmt(g.g2));
    }
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}
