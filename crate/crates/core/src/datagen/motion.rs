use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::{EnvWindow, WINDOW_SECONDS};
use crate::error::{MagnetError, Result};

const GRAVITY: f64 = 9.81;

/// Mean-reverting base acceleration plus bump/turn impulses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VibrationProfile {
    pub rate_hz: f64,
    /// Mean-reversion rate of the base process, 1/s.
    pub reversion: f64,
    /// Diffusion of the base process per axis, m/s^2 per sqrt(s).
    pub diffusion: [f64; 3],
    /// Expected impulses per second.
    pub impulse_rate: f64,
    /// Peak impulse amplitude, m/s^2.
    pub impulse_amp: f64,
    /// Relative impulse strength per axis (bumps load z, turns load y).
    pub impulse_axes: [f64; 3],
    /// Ring-down time of an impulse; 0 gives a single-sample spike.
    pub ring_s: f64,
    pub ring_hz: f64,
}

impl VibrationProfile {
    pub fn silent(rate_hz: f64) -> Self {
        Self {
            rate_hz,
            reversion: 2.0,
            diffusion: [0.0; 3],
            impulse_rate: 0.0,
            impulse_amp: 0.0,
            impulse_axes: [0.0; 3],
            ring_s: 0.0,
            ring_hz: 0.0,
        }
    }

    /// Low-intensity driving; RMSA clusters near 0.45 m/s^2.
    pub fn smooth(rate_hz: f64) -> Self {
        Self {
            rate_hz,
            reversion: 6.0,
            diffusion: [0.84, 0.84, 0.97],
            impulse_rate: 0.15,
            impulse_amp: 0.6,
            impulse_axes: [0.3, 0.6, 1.0],
            ring_s: 0.6,
            ring_hz: 2.5,
        }
    }

    /// Bumpy road and turns; RMSA clusters near 0.70 m/s^2.
    pub fn rough(rate_hz: f64) -> Self {
        Self {
            rate_hz,
            reversion: 6.0,
            diffusion: [1.3, 1.3, 1.5],
            impulse_rate: 0.4,
            impulse_amp: 0.7,
            impulse_axes: [0.3, 0.6, 1.0],
            ring_s: 0.6,
            ring_hz: 2.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz >= 10.0) || !self.rate_hz.is_finite() {
            return Err(MagnetError::Config(format!("sample rate {} Hz is below 10 Hz", self.rate_hz)));
        }
        let nonneg = |x: f64| x >= 0.0 && x.is_finite();
        if !nonneg(self.reversion)
            || !self.diffusion.iter().all(|&d| nonneg(d))
            || !nonneg(self.impulse_rate)
            || !nonneg(self.impulse_amp)
            || !nonneg(self.ring_s)
            || !nonneg(self.ring_hz)
        {
            return Err(MagnetError::Config(format!("invalid vibration profile {self:?}")));
        }
        Ok(())
    }
}

/// One scheduled impulse.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Impulse {
    pub sample: usize,
    pub axis: usize,
    pub amplitude: f64,
}

/// Random window: base process plus Poisson-scheduled impulses.
pub fn simulate_motion_window(p: &VibrationProfile, seed: u64) -> Result<EnvWindow> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = EnvWindow::samples_for(p.rate_hz);
    let lambda = p.impulse_rate * WINDOW_SECONDS;
    let count = if lambda > 0.0 {
        let d = Poisson::new(lambda).map_err(|e| MagnetError::Config(format!("impulse rate: {e}")))?;
        d.sample(&mut rng) as usize
    } else {
        0
    };
    let mut impulses = Vec::with_capacity(count * 3);
    for _ in 0..count {
        let sample = rng.random_range(0..n);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let strength = p.impulse_amp * (0.5 + rng.random::<f64>());
        for axis in 0..3 {
            impulses.push(Impulse { sample, axis, amplitude: sign * strength * p.impulse_axes[axis] });
        }
    }
    simulate_with_impulses(p, &impulses, &mut rng)
}

/// Window with an explicit impulse schedule; the base process draws from `rng`.
pub fn simulate_with_impulses(p: &VibrationProfile, impulses: &[Impulse], rng: &mut impl Rng) -> Result<EnvWindow> {
    p.validate()?;
    let n = EnvWindow::samples_for(p.rate_hz);
    let dt = 1.0 / p.rate_hz;
    let mut acc = vec![[0.0; 3]; n];
    // exact discretization of the OU process started at stationarity
    let decay = (-p.reversion * dt).exp();
    for axis in 0..3 {
        let d = p.diffusion[axis];
        if d == 0.0 {
            continue;
        }
        let stat = if p.reversion > 0.0 { d / (2.0 * p.reversion).sqrt() } else { 0.0 };
        let step = if p.reversion > 0.0 { stat * (1.0 - decay * decay).sqrt() } else { d * dt.sqrt() };
        let mut x = stat * normal(rng);
        for row in acc.iter_mut() {
            row[axis] = x;
            x = decay * x + step * normal(rng);
        }
    }
    for imp in impulses {
        if imp.sample >= n || imp.axis >= 3 {
            return Err(MagnetError::Config(format!("impulse {imp:?} outside a {n}-sample window")));
        }
        let ring = (p.ring_s * p.rate_hz).round() as usize;
        for j in 0..=ring.min(n - 1 - imp.sample) {
            let t = j as f64 * dt;
            let env = if ring == 0 { 1.0 } else { (-3.0 * t / p.ring_s).exp() };
            acc[imp.sample + j][imp.axis] += imp.amplitude * env * (2.0 * std::f64::consts::PI * p.ring_hz * t).cos();
        }
    }
    let vib = vibration_channels(&acc, p.rate_hz);
    Ok(EnvWindow { rate_hz: p.rate_hz, acc, vib })
}

/// Per axis: leaky-integrated velocity, leaky-integrated displacement, tilt
/// angle against gravity in degrees, and the zero-crossing frequency of the
/// velocity over the trailing second.
pub fn vibration_channels(acc: &[[f64; 3]], rate_hz: f64) -> Vec<[f64; 12]> {
    let dt = 1.0 / rate_hz;
    let leak = (1.0 - 0.5 * dt).max(0.0);
    let span = rate_hz.round().max(2.0) as usize;
    let mut vel = [0.0; 3];
    let mut disp = [0.0; 3];
    let mut vel_hist: Vec<[f64; 3]> = Vec::with_capacity(acc.len());
    let mut out = Vec::with_capacity(acc.len());
    for a in acc {
        let mut row = [0.0; 12];
        for c in 0..3 {
            vel[c] = leak * vel[c] + a[c] * dt;
            disp[c] = leak * disp[c] + vel[c] * dt;
        }
        vel_hist.push(vel);
        let start = vel_hist.len().saturating_sub(span);
        for c in 0..3 {
            let crossings = vel_hist[start..]
                .windows(2)
                .filter(|w| (w[0][c] < 0.0) != (w[1][c] < 0.0))
                .count();
            let seconds = (vel_hist.len() - start) as f64 * dt;
            row[c] = vel[c];
            row[3 + c] = a[c].atan2(GRAVITY).to_degrees();
            row[6 + c] = disp[c];
            row[9 + c] = crossings as f64 / (2.0 * seconds);
        }
        out.push(row);
    }
    out
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}
