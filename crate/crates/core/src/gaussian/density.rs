use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{gaussian_pred, GaussianPred, TargetState, TernaryGaussianParams};
use crate::error::{MagnetError, Result};
use crate::nn::graph::logsumexp;

const SYMMETRY_TOL: f64 = 1e-9;

/// Multivariate normal log-density through a Cholesky factorization.
pub fn log_pdf(g: &GaussianPred, s: &[f64]) -> Result<f64> {
    let d = g.dim();
    if s.len() != d || g.cov.len() != d * d {
        return Err(crate::error::dim_err("log_pdf", &[d, d], &[s.len()]));
    }
    let cov = DMatrix::from_row_slice(d, d, &g.cov);
    let scale = cov.amax().max(f64::MIN_POSITIVE);
    if (&cov - cov.transpose()).amax() > SYMMETRY_TOL * scale {
        return Err(MagnetError::Numeric(format!(
            "covariance is not symmetric: {:?}",
            g.cov
        )));
    }
    let Some(chol) = cov.clone().cholesky() else {
        let eig = SymmetricEigen::new(cov).eigenvalues;
        return Err(MagnetError::Numeric(format!(
            "covariance is not positive definite (eigenvalues {:?})",
            eig.as_slice()
        )));
    };
    let l = chol.l();
    let diff = DVector::from_iterator(d, s.iter().zip(&g.mean).map(|(a, b)| a - b));
    let y = l
        .solve_lower_triangular(&diff)
        .ok_or_else(|| MagnetError::Numeric("singular Cholesky factor".into()))?;
    let maha = y.norm_squared();
    let logdet: f64 = 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
    Ok(-0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + maha))
}

/// Target posterior under a uniform prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub ids: Vec<u32>,
    pub log_likelihood: Vec<f64>,
    pub probs: Vec<f64>,
    /// Every likelihood vanished, so the posterior fell back to uniform.
    pub underflow: bool,
}

impl Posterior {
    /// Target ids by decreasing posterior, ties to the lowest id.
    pub fn ranking(&self) -> Vec<u32> {
        rank_by_score(&self.ids, &self.log_likelihood)
    }
}

pub fn bayes_posterior(
    targets: &[TargetState],
    params: &TernaryGaussianParams,
    s: &[f64],
) -> Result<Posterior> {
    if targets.is_empty() {
        return Err(MagnetError::Input("posterior over zero targets".into()));
    }
    let ll = targets
        .iter()
        .map(|t| log_pdf(&gaussian_pred(t, params)?, s))
        .collect::<Result<Vec<f64>>>()?;
    let lse = logsumexp(&ll);
    let n = ll.len();
    let (probs, underflow) = if lse.is_finite() {
        (ll.iter().map(|l| (l - lse).exp()).collect(), false)
    } else {
        tracing::warn!("all target likelihoods underflow; using a uniform posterior");
        (vec![1.0 / n as f64; n], true)
    };
    Ok(Posterior {
        ids: targets.iter().map(|t| t.id).collect(),
        log_likelihood: ll,
        probs,
        underflow,
    })
}

/// Ids sorted by descending score, ties broken by lowest id, NaN last.
pub fn rank_by_score(ids: &[u32], scores: &[f64]) -> Vec<u32> {
    let mut idx: Vec<usize> = (0..ids.len()).collect();
    idx.sort_by(|&a, &b| {
        let (sa, sb) = (scores[a], scores[b]);
        match (sa.is_nan(), sb.is_nan()) {
            (true, false) => std::cmp::Ordering::Greater,
            (false, true) => std::cmp::Ordering::Less,
            (true, true) => ids[a].cmp(&ids[b]),
            _ => sb.partial_cmp(&sa).unwrap().then(ids[a].cmp(&ids[b])),
        }
    });
    idx.into_iter().map(|i| ids[i]).collect()
}
