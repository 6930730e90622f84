use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MagnetError, Result};
use crate::gaussian::{local_frame, TargetState, TernaryGaussianParams};

pub const DEFAULT_MIN_COUNT: usize = 30;

/// One endpoint expressed in the intended target's local frame.
#[derive(Clone, Debug, PartialEq)]
pub struct EndpointSample {
    pub size: f64,
    pub speed: f64,
    pub local: Vec<f64>,
}

impl EndpointSample {
    pub fn from_endpoint(target: &TargetState, endpoint: &[f64]) -> Result<Self> {
        let frame = local_frame(target)?;
        if endpoint.len() != target.dim() {
            return Err(crate::error::dim_err(
                "endpoint_sample",
                &[target.dim()],
                &[endpoint.len()],
            ));
        }
        Ok(Self {
            size: target.size,
            speed: target.speed,
            local: frame.to_local(endpoint),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMoments {
    pub size: f64,
    pub speed: f64,
    pub count: usize,
    pub mean: Vec<f64>,
    /// Unbiased, per local axis.
    pub var: Vec<f64>,
    pub low_confidence: bool,
    /// Some axis has zero variance.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionMoments {
    pub dim: usize,
    pub cells: Vec<CellMoments>,
    /// `(size, speed, count)` of cells dropped for having fewer than 2 samples.
    pub dropped: Vec<(f64, f64, usize)>,
}

/// Per-(size, speed) sample mean and unbiased variance of local offsets.
pub fn fit_condition_moments(samples: &[EndpointSample], min_count: usize) -> Result<ConditionMoments> {
    let Some(first) = samples.first() else {
        return Err(MagnetError::Fit("no endpoint samples".into()));
    };
    let dim = first.local.len();
    if samples.iter().any(|s| s.local.len() != dim) {
        return Err(MagnetError::Fit("endpoint samples of mixed dimension".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&samples[a], &samples[b]);
        x.size.total_cmp(&y.size).then(x.speed.total_cmp(&y.speed))
    });
    let mut cells = Vec::new();
    let mut dropped = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let key = &samples[order[start]];
        let mut end = start;
        while end < order.len()
            && samples[order[end]].size == key.size
            && samples[order[end]].speed == key.speed
        {
            end += 1;
        }
        let group: Vec<&EndpointSample> = order[start..end].iter().map(|&i| &samples[i]).collect();
        let n = group.len();
        if n < 2 {
            tracing::warn!(size = key.size, speed = key.speed, "dropping cell with {n} sample(s)");
            dropped.push((key.size, key.speed, n));
        } else {
            let mut mean = vec![0.0; dim];
            for s in &group {
                for (m, x) in mean.iter_mut().zip(&s.local) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; dim];
            for s in &group {
                for ((v, x), m) in var.iter_mut().zip(&s.local).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            var.iter_mut().for_each(|v| *v /= (n - 1) as f64);
            cells.push(CellMoments {
                size: key.size,
                speed: key.speed,
                count: n,
                degenerate: var.iter().any(|&v| v <= 0.0),
                low_confidence: n < min_count,
                mean,
                var,
            });
        }
        start = end;
    }
    Ok(ConditionMoments {
        dim,
        cells,
        dropped,
    })
}

/// Least-squares fit diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitResiduals {
    /// RMS residual of the mean regression, per axis.
    pub mean_rms: Vec<f64>,
    /// RMS residual of the variance regression, per axis.
    pub var_rms: Vec<f64>,
}

impl FitResiduals {
    pub fn norm(&self) -> f64 {
        self.mean_rms
            .iter()
            .chain(&self.var_rms)
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TernaryFit {
    pub params: TernaryGaussianParams,
    pub residuals: FitResiduals,
}

/// Mean: OLS of `mu_d` on `[1, v, w]`. Spread: least squares of `sigma_d^2`
/// on `[1, v^2, w^2]`, dropping negative coefficients and refitting until
/// all remaining ones are nonnegative.
pub fn fit_ternary_params(m: &ConditionMoments) -> Result<TernaryFit> {
    let cells = &m.cells;
    let grid = || {
        cells
            .iter()
            .map(|c| format!("({}, {})", c.size, c.speed))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let distinct = |f: fn(&CellMoments) -> f64| {
        let mut xs: Vec<f64> = cells.iter().map(f).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        xs.len()
    };
    if cells.len() < 3 || distinct(|c| c.size) < 2 || distinct(|c| c.speed) < 2 {
        return Err(MagnetError::Fit(format!(
            "need at least 3 cells over 2 sizes and 2 speeds, got grid [{}]",
            grid()
        )));
    }
    let n = cells.len();
    let mean_x = DMatrix::from_fn(n, 3, |r, c| match c {
        0 => 1.0,
        1 => cells[r].speed,
        _ => cells[r].size,
    });
    let var_x = DMatrix::from_fn(n, 3, |r, c| match c {
        0 => 1.0,
        1 => cells[r].speed * cells[r].speed,
        _ => cells[r].size * cells[r].size,
    });
    let mut params = TernaryGaussianParams {
        mu: Vec::with_capacity(m.dim),
        sigma: Vec::with_capacity(m.dim),
    };
    let mut residuals = FitResiduals::default();
    for d in 0..m.dim {
        let y = DVector::from_iterator(n, cells.iter().map(|c| c.mean[d]));
        let beta = least_squares(&mean_x, &y, &[0, 1, 2])
            .ok_or_else(|| MagnetError::Fit(format!("rank-deficient mean design over grid [{}]", grid())))?;
        residuals.mean_rms.push(rms_residual(&mean_x, &y, &beta));
        params.mu.push([beta[0], beta[1], beta[2]]);

        let y = DVector::from_iterator(n, cells.iter().map(|c| c.var[d]));
        let mut active = vec![0usize, 1, 2];
        let beta = loop {
            let b = least_squares(&var_x, &y, &active).ok_or_else(|| {
                MagnetError::Fit(format!("rank-deficient variance design over grid [{}]", grid()))
            })?;
            let negative: Vec<usize> = active.iter().copied().filter(|&j| b[j] < 0.0).collect();
            if negative.is_empty() {
                break b;
            }
            active.retain(|j| !negative.contains(j));
        };
        residuals.var_rms.push(rms_residual(&var_x, &y, &beta));
        params.sigma.push([beta[0].sqrt(), beta[1].sqrt(), beta[2].sqrt()]);
    }
    Ok(TernaryFit { params, residuals })
}

/// Least squares restricted to `cols`; coefficients of other columns are 0.
/// Columns are rescaled to unit max-norm for conditioning. `None` when the
/// restricted design is rank deficient.
fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>, cols: &[usize]) -> Option<[f64; 3]> {
    let mut out = [0.0; 3];
    if cols.is_empty() {
        return Some(out);
    }
    let scales: Vec<f64> = cols.iter().map(|&j| x.column(j).amax().max(f64::MIN_POSITIVE)).collect();
    let a = DMatrix::from_fn(x.nrows(), cols.len(), |r, c| x[(r, cols[c])] / scales[c]);
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-10 * smax {
        return None;
    }
    let b = svd.solve(y, 0.0).ok()?;
    for (c, &j) in cols.iter().enumerate() {
        out[j] = b[c] / scales[c];
    }
    Some(out)
}

fn rms_residual(x: &DMatrix<f64>, y: &DVector<f64>, beta: &[f64; 3]) -> f64 {
    let b = DVector::from_row_slice(beta);
    let r = y - x * b;
    (r.norm_squared() / y.len() as f64).sqrt()
}
