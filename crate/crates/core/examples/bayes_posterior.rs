//! Endpoint density of one expert around a moving target, and the
//! posterior over a small scene for a touch that lags behind the motion.
//!
//! cargo run --example bayes_posterior

use magnet::datagen::truth::ground_truth;
use magnet::gaussian::{bayes_posterior, gaussian_pred, TargetState};

fn main() -> magnet::Result<()> {
    let p = ground_truth("s-f").expect("known id");
    let targets = vec![
        TargetState { id: 0, center: vec![800.0, 600.0], size: 95.0, speed: 800.0, dir: vec![1.0, 0.0] },
        TargetState { id: 1, center: vec![700.0, 640.0], size: 95.0, speed: 300.0, dir: vec![0.0, 1.0] },
        TargetState { id: 2, center: vec![1200.0, 300.0], size: 65.0, speed: 550.0, dir: vec![-0.6, 0.8] },
    ];
    let g = gaussian_pred(&targets[0], &p)?;
    println!("target 0: predicted endpoint mean {:?}, covariance {:?}", g.mean, g.cov);

    // the finger lands 150 px behind target 0, which is closer to target 1
    let touch = [650.0, 605.0];
    let post = bayes_posterior(&targets, &p, &touch)?;
    for ((id, ll), pr) in post.ids.iter().zip(&post.log_likelihood).zip(&post.probs) {
        println!("target {id}: log-likelihood {ll:9.3}, posterior {pr:.3}");
    }
    println!("ranking {:?} (nearest target is 1)", post.ranking());
    Ok(())
}
