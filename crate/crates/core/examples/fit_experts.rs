//! Fits Ternary-Gaussian experts from the calibration presets and compares
//! the fitted coefficients with the generator's endpoint models.
//!
//! cargo run --example fit_experts

use magnet::datagen::truth::ground_truth;
use magnet::experts::{fit_calibration_registry, CALIBRATION_SEED, DEFAULT_MIN_COUNT};

fn main() -> magnet::Result<()> {
    let reg = fit_calibration_registry(&["s-f", "s-h", "w-h"], CALIBRATION_SEED, 10.0, DEFAULT_MIN_COUNT)?;
    for e in reg.experts() {
        let truth = ground_truth(&e.id).expect("known id");
        println!("{} ({} cells, {})", e.id, e.provenance.condition_grid.len(), e.provenance.source);
        for d in 0..e.dim {
            println!(
                "  axis {d}: mu {:>8.3?} (true {:?})\n          sigma {:>8.3?} (true {:?})",
                e.params.mu[d], truth.mu[d], e.params.sigma[d], truth.sigma[d]
            );
        }
        println!("  residual rms: mean {:?}, var {:?}", e.provenance.residuals.mean_rms, e.provenance.residuals.var_rms);
    }
    Ok(())
}
