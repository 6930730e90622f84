//! Context encoders: user profile, vibration and acceleration windows, target
//! attributes, and the context-aware weighting head that turns their
//! concatenation into expert fusion weights.

mod nets;

pub use nets::{CawHead, SeriesEncoder, SeriesKind, TargetEncoder, UserEncoder};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MagnetError, Result};
use crate::gaussian::TargetState;

pub const USER_FEATURES: usize = 6;
pub const ACC_CHANNELS: usize = 3;
pub const VIB_CHANNELS: usize = 12;
pub const WINDOW_SECONDS: f64 = 3.0;

/// Offsets of each block inside `h_con`.
pub const H_USER: std::ops::Range<usize> = 0..64;
pub const H_VIB: std::ops::Range<usize> = 64..192;
pub const H_ACC: std::ops::Range<usize> = 192..320;
pub const H_TARGET: std::ops::Range<usize> = 320..384;
pub const H_CON: usize = 384;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gesture {
    Fixed,
    Handheld,
    Controller,
}

impl Gesture {
    pub const ALL: [Gesture; 3] = [Gesture::Fixed, Gesture::Handheld, Gesture::Controller];

    pub fn as_str(self) -> &'static str {
        match self {
            Gesture::Fixed => "fixed",
            Gesture::Handheld => "handheld",
            Gesture::Controller => "controller",
        }
    }
}

impl fmt::Display for Gesture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Gesture {
    type Err = MagnetError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| MagnetError::Input(format!("unknown gesture {s:?}; expected one of fixed, handheld, controller")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
}

impl FromStr for Gender {
    type Err = MagnetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "female" => Ok(Gender::Female),
            "male" => Ok(Gender::Male),
            _ => Err(MagnetError::Input(format!("unknown gender {s:?}; expected one of female, male"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub gesture: Gesture,
    pub age: f64,
    pub gender: Gender,
}

/// Bounds for min-max normalization of numeric profile fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormConfig {
    pub age_range: (f64, f64),
}

impl Default for NormConfig {
    fn default() -> Self {
        Self { age_range: (18.0, 60.0) }
    }
}

/// `[fixed, handheld, controller, age, female, male]`, age min-max scaled and
/// clamped to `[0, 1]`.
pub fn user_features(u: &UserProfile, norm: &NormConfig) -> Result<[f64; USER_FEATURES]> {
    let (lo, hi) = norm.age_range;
    if !(hi > lo) {
        return Err(MagnetError::Config(format!("age range [{lo}, {hi}] is empty")));
    }
    if !u.age.is_finite() {
        return Err(MagnetError::Input(format!("age {} is not finite", u.age)));
    }
    let mut f = [0.0; USER_FEATURES];
    f[u.gesture as usize] = 1.0;
    f[3] = ((u.age - lo) / (hi - lo)).clamp(0.0, 1.0);
    match u.gender {
        Gender::Female => f[4] = 1.0,
        Gender::Male => f[5] = 1.0,
    }
    Ok(f)
}

/// 3 s of acceleration (m/s^2, x/y/z) and vibration channels sampled at
/// `rate_hz`. Vibration channels per axis: velocity, angle, displacement,
/// frequency, laid out `[vx, vy, vz, ax, ay, az, dx, dy, dz, fx, fy, fz]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvWindow {
    pub rate_hz: f64,
    pub acc: Vec<[f64; ACC_CHANNELS]>,
    pub vib: Vec<[f64; VIB_CHANNELS]>,
}

impl EnvWindow {
    pub fn samples_for(rate_hz: f64) -> usize {
        (WINDOW_SECONDS * rate_hz).round() as usize
    }

    pub fn zeros(rate_hz: f64) -> Self {
        let n = Self::samples_for(rate_hz);
        Self {
            rate_hz,
            acc: vec![[0.0; ACC_CHANNELS]; n],
            vib: vec![[0.0; VIB_CHANNELS]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.acc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acc.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0) {
            return Err(MagnetError::Validation(format!("sample rate {} must be > 0", self.rate_hz)));
        }
        let want = WINDOW_SECONDS * self.rate_hz;
        if self.acc.len() != self.vib.len() || (self.acc.len() as f64 - want).abs() > 1.0 {
            return Err(MagnetError::Validation(format!(
                "window has {} acc and {} vib samples, expected {want} at {} Hz",
                self.acc.len(),
                self.vib.len(),
                self.rate_hz
            )));
        }
        let finite = self.acc.iter().flatten().chain(self.vib.iter().flatten()).all(|x| x.is_finite());
        if !finite {
            return Err(MagnetError::Validation("window contains non-finite samples".into()));
        }
        Ok(())
    }

    /// Linear interpolation onto `rate_hz` over the same 3 s span.
    pub fn resample(&self, rate_hz: f64) -> Result<Self> {
        if self.is_empty() {
            return Err(MagnetError::Input("cannot resample an empty window".into()));
        }
        if rate_hz == self.rate_hz && self.len() == Self::samples_for(rate_hz) {
            return Ok(self.clone());
        }
        let n = Self::samples_for(rate_hz);
        let src = self.len();
        let pos = |i: usize| {
            if n == 1 || src == 1 {
                0.0
            } else {
                i as f64 * (src - 1) as f64 / (n - 1) as f64
            }
        };
        fn lerp<const C: usize>(xs: &[[f64; C]], p: f64) -> [f64; C] {
            let i = (p.floor() as usize).min(xs.len() - 1);
            let j = (i + 1).min(xs.len() - 1);
            let f = p - i as f64;
            let mut out = [0.0; C];
            for c in 0..C {
                out[c] = xs[i][c] + f * (xs[j][c] - xs[i][c]);
            }
            out
        }
        Ok(Self {
            rate_hz,
            acc: (0..n).map(|i| lerp(&self.acc, pos(i))).collect(),
            vib: (0..n).map(|i| lerp(&self.vib, pos(i))).collect(),
        })
    }
}

/// Screen (2D) or scene (3D) extents and reference size/speed used to
/// normalize target attributes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskGeometry {
    /// `[min, max]` per world axis.
    pub bounds: Vec<[f64; 2]>,
    pub w_ref: f64,
    pub v_ref: f64,
}

impl TaskGeometry {
    /// 2560 x 1600 px tablet, sizes up to 155 px, speeds up to 1050 px/s.
    pub fn screen_2d() -> Self {
        Self {
            bounds: vec![[0.0, 2560.0], [0.0, 1600.0]],
            w_ref: 155.0,
            v_ref: 1050.0,
        }
    }

    /// Scene box in metres with depth along +z from 0.25 to 0.6.
    pub fn scene_3d() -> Self {
        Self {
            bounds: vec![[-0.5, 0.5], [-0.3, 0.3], [0.25, 0.6]],
            w_ref: 0.16,
            v_ref: 0.56,
        }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn target_features(&self) -> usize {
        2 * self.dim() + 2
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.dim()) {
            return Err(MagnetError::Config(format!("geometry must be 2D or 3D, got {}D", self.dim())));
        }
        if self.bounds.iter().any(|b| !(b[1] > b[0])) || !(self.w_ref > 0.0) || !(self.v_ref > 0.0) {
            return Err(MagnetError::Config(format!("degenerate task geometry {self:?}")));
        }
        Ok(())
    }
}

/// `[coords normalized to [0,1] by the extents, w / w_ref, v / v_ref, tangent]`.
pub fn target_features(t: &TargetState, geo: &TaskGeometry) -> Result<Vec<f64>> {
    t.validate()?;
    if t.dim() != geo.dim() {
        return Err(crate::error::dim_err("target_features", &[geo.dim()], &[t.dim()]));
    }
    let mut f = Vec::with_capacity(geo.target_features());
    for (x, b) in t.center.iter().zip(&geo.bounds) {
        f.push((x - b[0]) / (b[1] - b[0]));
    }
    f.push(t.size / geo.w_ref);
    f.push(t.speed / geo.v_ref);
    let frame = crate::gaussian::local_frame(t)?;
    f.extend_from_slice(&frame.axes[0]);
    Ok(f)
}

/// Frozen per-channel standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Mean and population standard deviation over every sample of every
    /// series. Channels with zero spread keep unit scale.
    pub fn fit<'a>(series: impl IntoIterator<Item = &'a [f64]>, channels: usize) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for row in series {
            if row.len() != channels {
                return Err(crate::error::dim_err("channel_stats", &[channels], &[row.len()]));
            }
            n += 1;
            for c in 0..channels {
                sum[c] += row[c];
                sq[c] += row[c] * row[c];
            }
        }
        if n == 0 {
            return Err(MagnetError::Input("no samples for channel statistics".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let v = (q / n as f64 - m * m).max(0.0);
                if v > 1e-24 { v.sqrt() } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, row: &[f64], out: &mut Vec<f64>) {
        out.extend(row.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s));
    }
}
