//! Generator-side endpoint models. These are synthetic stand-ins chosen to
//! give each scenario a distinct shape (lag along the motion, anisotropy);
//! shipped experts are fitted back from data generated with them.

use crate::gaussian::TernaryGaussianParams;

pub const GROUND_TRUTH_IDS: [&str; 4] = ["s-f", "s-h", "w-h", "3d"];

pub fn ground_truth(id: &str) -> Option<TernaryGaussianParams> {
    let p = match id {
        // seated, tablet fixed: strong lag behind the motion, narrow across it
        "s-f" => TernaryGaussianParams {
            mu: vec![[0.0, -0.2, 0.0], [0.0, 0.0, 0.0]],
            sigma: vec![[18.0, 0.06, 0.2], [14.0, 0.03, 0.15]],
        },
        // seated, handheld: little lag, rounder and wider
        "s-h" => TernaryGaussianParams {
            mu: vec![[0.0, -0.12, 0.15], [8.0, 0.0, 0.0]],
            sigma: vec![[26.0, 0.045, 0.2], [26.0, 0.045, 0.2]],
        },
        // walking, handheld
        "w-h" => TernaryGaussianParams {
            mu: vec![[0.0, -0.15, 0.0], [0.0, 0.0, 0.0]],
            sigma: vec![[34.0, 0.06, 0.25], [30.0, 0.05, 0.22]],
        },
        // VR controller; metres, size is the radius
        "3d" => TernaryGaussianParams {
            mu: vec![[0.0, -0.3, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.2]],
            sigma: vec![[0.03, 0.08, 0.35], [0.03, 0.05, 0.3], [0.04, 0.05, 0.4]],
        },
        _ => return None,
    };
    Some(p)
}
