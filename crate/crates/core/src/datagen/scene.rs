use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MagnetError, Result};
use crate::gaussian::TargetState;

/// Moving targets inside an axis-aligned box, bouncing specularly off its
/// walls.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub bounds: Vec<[f64; 2]>,
    /// Targets stay fully inside (centers in the box shrunk by the radius);
    /// otherwise only centers are bounded.
    pub contain: bool,
    pub targets: Vec<TargetState>,
}

impl Scene {
    /// `n` non-overlapping targets of one size and speed with uniform random
    /// positions and directions.
    pub fn random(
        rng: &mut impl Rng,
        bounds: &[[f64; 2]],
        n: usize,
        size: f64,
        speed: f64,
        contain: bool,
    ) -> Result<Self> {
        let dim = bounds.len();
        let proto = TargetState { id: 0, center: vec![0.0; dim], size, speed, dir: unit_x(dim) };
        let r = proto.radius();
        let margin = if contain { r } else { 0.0 };
        let inner: Vec<[f64; 2]> = bounds.iter().map(|b| [b[0] + margin, b[1] - margin]).collect();
        if inner.iter().any(|b| !(b[1] > b[0])) {
            return Err(MagnetError::Generation(format!(
                "bounds {bounds:?} cannot hold a target of radius {r}"
            )));
        }
        let mut targets: Vec<TargetState> = Vec::with_capacity(n);
        let max_tries = 10_000;
        let mut tries = 0;
        while targets.len() < n {
            tries += 1;
            if tries > max_tries {
                return Err(MagnetError::Generation(format!(
                    "could not place {n} non-overlapping targets of radius {r} in {bounds:?}"
                )));
            }
            let center: Vec<f64> = inner.iter().map(|b| rng.random_range(b[0]..b[1])).collect();
            let clear = targets.iter().all(|t| {
                let d2: f64 = t.center.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
                d2 >= (2.0 * r) * (2.0 * r)
            });
            if clear {
                targets.push(TargetState {
                    id: targets.len() as u32,
                    center,
                    size,
                    speed,
                    dir: random_unit(rng, dim),
                });
            }
        }
        Ok(Self { bounds: bounds.to_vec(), contain, targets })
    }

    /// Advances every target by `dt`, reflecting at the walls.
    pub fn step(&mut self, dt: f64) {
        for t in &mut self.targets {
            let r = if self.contain { t.radius() } else { 0.0 };
            for (d, b) in self.bounds.iter().enumerate() {
                let (lo, hi) = (b[0] + r, b[1] - r);
                let mut x = t.center[d] + t.speed * t.dir[d] * dt;
                // repeated folding handles steps longer than the box
                loop {
                    if x < lo {
                        x = 2.0 * lo - x;
                        t.dir[d] = -t.dir[d];
                    } else if x > hi {
                        x = 2.0 * hi - x;
                        t.dir[d] = -t.dir[d];
                    } else {
                        break;
                    }
                }
                t.center[d] = x;
            }
        }
    }

    pub fn advance(&mut self, seconds: f64, dt: f64) {
        let steps = (seconds / dt).ceil() as usize;
        for _ in 0..steps {
            self.step(seconds / steps as f64);
        }
    }
}

/// Reflects `dir` about the plane with unit normal `normal`.
pub fn reflect(dir: &[f64], normal: &[f64]) -> Vec<f64> {
    let dot: f64 = dir.iter().zip(normal).map(|(a, b)| a * b).sum();
    dir.iter().zip(normal).map(|(d, n)| d - 2.0 * dot * n).collect()
}

fn unit_x(dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[0] = 1.0;
    v
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}
