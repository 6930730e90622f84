//! Ternary-Gaussian endpoint model: target-local frames, per-axis moments,
//! endpoint Gaussians and Bayesian target decoding.

mod density;

pub use density::{bayes_posterior, log_pdf, rank_by_score, Posterior};

use serde::{Deserialize, Serialize};

use crate::error::{MagnetError, Result};

/// Viewing (depth) axis of 3D scenes.
pub const DEPTH_AXIS: [f64; 3] = [0.0, 0.0, 1.0];

const UNIT_TOL: f64 = 1e-9;

/// One moving target at the instant of selection. Positions are px (2D) or
/// m (3D); `size` is the diameter in 2D and the radius in 3D.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetState {
    pub id: u32,
    pub center: Vec<f64>,
    pub size: f64,
    pub speed: f64,
    pub dir: Vec<f64>,
}

impl TargetState {
    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Radius of the selectable region.
    pub fn radius(&self) -> f64 {
        if self.dim() == 2 {
            self.size / 2.0
        } else {
            self.size
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d != 2 && d != 3 {
            return Err(MagnetError::Input(format!(
                "target {} has dimension {d}, expected 2 or 3",
                self.id
            )));
        }
        if self.dir.len() != d {
            return Err(MagnetError::Input(format!(
                "target {} direction has {} components for a {d}D center",
                self.id,
                self.dir.len()
            )));
        }
        let finite = self.center.iter().chain(&self.dir).all(|x| x.is_finite());
        if !finite || !self.size.is_finite() || !self.speed.is_finite() {
            return Err(MagnetError::Input(format!("target {} has non-finite fields", self.id)));
        }
        if self.size <= 0.0 {
            return Err(MagnetError::Input(format!(
                "target {} size must be > 0, got {}",
                self.id, self.size
            )));
        }
        if self.speed < 0.0 {
            return Err(MagnetError::Input(format!(
                "target {} speed must be >= 0, got {}",
                self.id, self.speed
            )));
        }
        if self.speed > 0.0 && (norm(&self.dir) - 1.0).abs() > UNIT_TOL {
            return Err(MagnetError::Input(format!(
                "target {} direction is not a unit vector",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameStatus {
    Regular,
    /// Speed is zero, so the canonical axes are used.
    ZeroSpeed,
    /// 3D motion parallel to the depth axis; the normal falls back to the
    /// canonical axis least aligned with the motion.
    DepthParallel,
}

/// Target-centred orthonormal frame: tangent, normal (and binormal in 3D).
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFrame {
    pub origin: Vec<f64>,
    /// One unit axis per row.
    pub axes: Vec<Vec<f64>>,
    pub status: FrameStatus,
}

impl LocalFrame {
    pub fn dim(&self) -> usize {
        self.origin.len()
    }

    /// Coordinates of world point `p` along the frame axes.
    pub fn to_local(&self, p: &[f64]) -> Vec<f64> {
        let rel: Vec<f64> = p.iter().zip(&self.origin).map(|(a, b)| a - b).collect();
        self.axes.iter().map(|ax| dot(ax, &rel)).collect()
    }

    pub fn to_world(&self, local: &[f64]) -> Vec<f64> {
        let mut out = self.origin.clone();
        for (ax, &c) in self.axes.iter().zip(local) {
            for (o, a) in out.iter_mut().zip(ax) {
                *o += c * a;
            }
        }
        out
    }
}

pub fn local_frame(t: &TargetState) -> Result<LocalFrame> {
    local_frame_with_depth(t, DEPTH_AXIS)
}

/// Frame with an explicit 3D depth axis (ignored in 2D).
pub fn local_frame_with_depth(t: &TargetState, depth: [f64; 3]) -> Result<LocalFrame> {
    t.validate()?;
    let d = t.dim();
    let zero = t.speed == 0.0 || norm(&t.dir) == 0.0;
    if d == 2 {
        let (tan, status) = if zero {
            (vec![1.0, 0.0], FrameStatus::ZeroSpeed)
        } else {
            (t.dir.clone(), FrameStatus::Regular)
        };
        let normal = vec![-tan[1], tan[0]];
        return Ok(LocalFrame {
            origin: t.center.clone(),
            axes: vec![tan, normal],
            status,
        });
    }
    let tan = if zero { vec![1.0, 0.0, 0.0] } else { t.dir.clone() };
    let dz = depth_unit(depth)?;
    let (normal, status) = match orthogonal_unit(&dz, &tan) {
        Some(n) if zero => (n, FrameStatus::ZeroSpeed),
        Some(n) => (n, FrameStatus::Regular),
        None => {
            let fallback = least_aligned_axis(&tan);
            let n = orthogonal_unit(&fallback, &tan).expect("least aligned axis is independent");
            let status = if zero {
                FrameStatus::ZeroSpeed
            } else {
                FrameStatus::DepthParallel
            };
            (n, status)
        }
    };
    let binormal = cross(&tan, &normal);
    Ok(LocalFrame {
        origin: t.center.clone(),
        axes: vec![tan, normal, binormal],
        status,
    })
}

fn depth_unit(depth: [f64; 3]) -> Result<Vec<f64>> {
    let n = norm(&depth);
    if !(n > 0.0) || !n.is_finite() {
        return Err(MagnetError::Config("depth axis must be a non-zero vector".into()));
    }
    Ok(depth.iter().map(|x| x / n).collect())
}

/// Unit component of `v` orthogonal to unit vector `u`, if not degenerate.
fn orthogonal_unit(v: &[f64], u: &[f64]) -> Option<Vec<f64>> {
    let p = dot(v, u);
    let r: Vec<f64> = v.iter().zip(u).map(|(a, b)| a - p * b).collect();
    let n = norm(&r);
    (n > 1e-9).then(|| r.iter().map(|x| x / n).collect())
}

fn least_aligned_axis(u: &[f64]) -> Vec<f64> {
    let mut best = 0;
    for i in 1..u.len() {
        if u[i].abs() < u[best].abs() {
            best = i;
        }
    }
    let mut e = vec![0.0; u.len()];
    e[best] = 1.0;
    e
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn cross(a: &[f64], b: &[f64]) -> Vec<f64> {
    vec![
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Per-axis Ternary-Gaussian coefficients. Each row is `[absolute, speed,
/// size]`; rows follow the local frame order (tangent, normal, binormal).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TernaryGaussianParams {
    #[serde(rename = "mu_coeffs")]
    pub mu: Vec<[f64; 3]>,
    #[serde(rename = "sigma_coeffs")]
    pub sigma: Vec<[f64; 3]>,
}

/// Coefficients per axis in the flat layout.
pub const COEFFS_PER_AXIS: usize = 6;

impl TernaryGaussianParams {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn num_params(&self) -> usize {
        self.dim() * COEFFS_PER_AXIS
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if (d != 2 && d != 3) || self.sigma.len() != d {
            return Err(MagnetError::Validation(format!(
                "ternary parameters need 2 or 3 axes for both mean and spread, got {} and {}",
                d,
                self.sigma.len()
            )));
        }
        let all = self.mu.iter().chain(&self.sigma).flatten();
        if all.clone().any(|x| !x.is_finite()) {
            return Err(MagnetError::Validation("non-finite ternary coefficient".into()));
        }
        if self.sigma.iter().flatten().any(|&s| s < 0.0) {
            return Err(MagnetError::Validation("negative spread coefficient".into()));
        }
        Ok(())
    }

    /// Flat layout: per axis `[mu_a, mu_v, mu_w, sig_a, sig_v, sig_w]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (m, s) in self.mu.iter().zip(&self.sigma) {
            out.extend_from_slice(m);
            out.extend_from_slice(s);
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % COEFFS_PER_AXIS != 0 {
            return Err(MagnetError::Input(format!(
                "flat parameter vector of length {} is not a multiple of {COEFFS_PER_AXIS}",
                flat.len()
            )));
        }
        let (mu, sigma) = flat
            .chunks(COEFFS_PER_AXIS)
            .map(|c| ([c[0], c[1], c[2]], [c[3], c[4], c[5]]))
            .unzip();
        Ok(Self { mu, sigma })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisMoments {
    pub mean: f64,
    pub var: f64,
}

/// `mu_d = mu_a + mu_v v + mu_w w`, `sigma_d^2 = sig_a^2 + (sig_v v)^2 + (sig_w w)^2`.
pub fn ternary_moments(p: &TernaryGaussianParams, v: f64, w: f64) -> Result<Vec<AxisMoments>> {
    if !(w > 0.0) {
        return Err(MagnetError::Input(format!("target size must be > 0, got {w}")));
    }
    if !(v >= 0.0) {
        return Err(MagnetError::Input(format!("target speed must be >= 0, got {v}")));
    }
    Ok(p.mu
        .iter()
        .zip(&p.sigma)
        .map(|(m, s)| AxisMoments {
            mean: m[0] + m[1] * v + m[2] * w,
            var: s[0] * s[0] + (s[1] * v).powi(2) + (s[2] * w).powi(2),
        })
        .collect())
}

/// Endpoint Gaussian in world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPred {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
}

impl GaussianPred {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_at(&self, i: usize, j: usize) -> f64 {
        self.cov[i * self.dim() + j]
    }
}

pub fn gaussian_pred(t: &TargetState, p: &TernaryGaussianParams) -> Result<GaussianPred> {
    let frame = local_frame(t)?;
    if p.dim() != t.dim() {
        return Err(MagnetError::Config(format!(
            "{}D parameters applied to a {}D target",
            p.dim(),
            t.dim()
        )));
    }
    let m = ternary_moments(p, t.speed, t.size)?;
    Ok(gaussian_in_frame(&frame, &m))
}

/// `mean = origin + sum_d mu_d axis_d`, `cov = R diag(sigma_d^2) R^T`.
pub fn gaussian_in_frame(frame: &LocalFrame, m: &[AxisMoments]) -> GaussianPred {
    let d = frame.dim();
    let local: Vec<f64> = m.iter().map(|x| x.mean).collect();
    let mean = frame.to_world(&local);
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] = frame
                .axes
                .iter()
                .zip(m)
                .map(|(ax, mo)| ax[i] * ax[j] * mo.var)
                .sum();
        }
    }
    GaussianPred { mean, cov }
}
