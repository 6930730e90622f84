use std::ops::Range;

use super::MagnetModel;
use crate::datagen::TrialRecord;
use crate::encoders::{target_features, user_features, EnvWindow, ACC_CHANNELS, VIB_CHANNELS};
use crate::error::{MagnetError, Result};
use crate::gaussian::{local_frame, COEFFS_PER_AXIS};
use crate::nn::{ForwardCtx, Graph, Real, Tensor, Var, LEAKY_SLOPE};

/// Model inputs for a group of trials. Trial-level inputs have one row per
/// trial (series: `trial * T + t`); target-level inputs have one row per
/// candidate target, trials laid out contiguously.
#[derive(Clone, Debug)]
pub struct Batch {
    pub trials: usize,
    pub seq: usize,
    pub user: Tensor<f64>,
    pub vib: Tensor<f64>,
    pub acc: Tensor<f64>,
    pub target: Tensor<f64>,
    pub row_trial: Vec<usize>,
    pub rows: Vec<Range<usize>>,
    /// Endpoint in each row's target-local frame, `R x dim`.
    pub local: Tensor<f64>,
    /// `[1, v, w]` repeated per axis and per mean/spread block, `R x dim*6`.
    pub regressors: Tensor<f64>,
    /// Row index of the intended target, when labelled.
    pub positive: Vec<Option<usize>>,
    pub env_missing: Vec<bool>,
}

impl Batch {
    pub fn num_rows(&self) -> usize {
        self.row_trial.len()
    }
}

impl MagnetModel {
    pub fn prepare_batch(&self, trials: &[&TrialRecord]) -> Result<Batch> {
        if trials.is_empty() {
            return Err(MagnetError::Input("empty batch".into()));
        }
        let dim = self.dim();
        let rate = self.config.rate_hz;
        let seq = EnvWindow::samples_for(rate);
        let mut user = Vec::new();
        let (mut vib_rows, mut acc_rows) = (Vec::new(), Vec::new());
        let mut target = Vec::new();
        let mut local = Vec::new();
        let mut regressors = Vec::new();
        let mut row_trial = Vec::new();
        let mut rows = Vec::new();
        let mut positive = Vec::new();
        let mut env_missing = Vec::new();
        for (i, trial) in trials.iter().enumerate() {
            trial.validate_scene()?;
            if trial.dim() != dim {
                return Err(MagnetError::Config(format!(
                    "trial {} is {}D but the model is {dim}D",
                    trial.trial_id,
                    trial.dim()
                )));
            }
            user.extend_from_slice(&user_features(&trial.user.profile, &self.config.norm)?);
            let window = match &trial.env {
                Some(w) => w.resample(rate)?,
                None => EnvWindow::zeros(rate),
            };
            env_missing.push(trial.env.is_none());
            vib_rows.extend(window.vib);
            acc_rows.extend(window.acc);
            let start = row_trial.len();
            for t in &trial.targets {
                let s = &t.state;
                target.extend(target_features(s, &self.config.geometry)?);
                local.extend(local_frame(s)?.to_local(&trial.endpoint));
                for _ in 0..2 * dim {
                    regressors.extend_from_slice(&[1.0, s.speed, s.size]);
                }
                row_trial.push(i);
            }
            rows.push(start..row_trial.len());
            positive.push(trial.intended_index().map(|j| start + j));
        }
        let b = trials.len();
        let r = row_trial.len();
        let vib = self
            .nets
            .vib
            .standardize(&self.store, vib_rows.iter().map(|x| &x[..VIB_CHANNELS]))?;
        let acc = self
            .nets
            .acc
            .standardize(&self.store, acc_rows.iter().map(|x| &x[..ACC_CHANNELS]))?;
        Ok(Batch {
            trials: b,
            seq,
            user: Tensor::matrix(b, user.len() / b, user)?,
            vib,
            acc,
            target: Tensor::matrix(r, self.config.geometry.target_features(), target)?,
            row_trial,
            rows,
            local: Tensor::matrix(r, dim, local)?,
            regressors: Tensor::matrix(r, dim * 2 * 3, regressors)?,
            positive,
            env_missing,
        })
    }

    /// Full differentiable pipeline for one batch.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        batch: &Batch,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Forward> {
        let store = &self.store;
        let nets = &self.nets;
        let dim = self.dim();
        let p = dim * COEFFS_PER_AXIS;
        let k = self.k();

        let u = g.constant(batch.user.cast());
        let hu = nets.user.forward(g, store, u)?;
        let xv = g.constant(batch.vib.cast());
        let hv = nets.vib.forward(g, store, xv, batch.trials, batch.seq)?;
        let xa = g.constant(batch.acc.cast());
        let ha = nets.acc.forward(g, store, xa, batch.trials, batch.seq)?;
        let trial_ctx = g.concat_cols(&[hu, hv, ha])?;
        let per_row = g.gather_rows(trial_ctx, batch.row_trial.clone())?;
        let xt = g.constant(batch.target.cast());
        let ht = nets.target.forward(g, store, xt)?;
        let h_con = g.concat_cols(&[per_row, ht])?;

        let logits = nets.caw.logits(g, store, h_con, ctx)?;
        let log_w = g.log_softmax_rows(logits, self.config.tau)?;

        let a_in = g.concat_cols(&[ht, h_con])?;
        let a = nets.adapt_hidden.forward(g, store, a_in)?;
        let a = g.leaky_relu(a, LEAKY_SLOPE);
        let deltas = nets.adapt_out.forward(g, store, a)?;

        let (add_row, log_row) = self.adaptation_rows();
        let add_row = g.constant(Tensor::row(add_row).cast());
        let log_row = g.constant(Tensor::row(log_row).cast());
        let regs = g.constant(batch.regressors.cast());
        let local = g.constant(batch.local.cast());
        let (mean_sel, var_sel) = selectors::<T>(dim);
        let mean_sel = g.constant(mean_sel);
        let var_sel = g.constant(var_sel);
        let log_norm = -0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln();

        let mut theta = Vec::with_capacity(k);
        let mut comps = Vec::with_capacity(k);
        for (j, expert) in self.registry.experts().iter().enumerate() {
            let d = g.slice_cols(deltas, j * p, p)?;
            let th = g.tanh(d);
            // mean: theta + rho_mu * s * tanh(d); spread: sigma * exp(rho_sigma * tanh(d))
            let shift = g.mul_row(th, add_row)?;
            let base = g.constant(Tensor::row(expert.params.to_flat()).cast());
            let shifted = g.add_row(shift, base)?;
            let log_scale = g.mul_row(th, log_row)?;
            let scale = g.exp(log_scale);
            let adapted = g.mul(shifted, scale)?;
            theta.push(adapted);

            // Diagonal Gaussian in the target frame; rotation has unit
            // determinant so this equals the world-frame density.
            let terms = g.mul(adapted, regs)?;
            let means = g.matmul(terms, mean_sel)?;
            let sq = g.square(terms);
            let vars = g.matmul(sq, var_sel)?;
            let diff = g.sub(local, means)?;
            let d2 = g.square(diff);
            let maha = g.div(d2, vars)?;
            let logv = g.log(vars);
            let both = g.add(maha, logv)?;
            let s = g.sum_cols(both);
            let s = g.scale(s, -0.5);
            comps.push(g.add_scalar(s, log_norm));
        }
        let comp = g.concat_cols(&comps)?;
        let joint = g.add(log_w, comp)?;
        let fused = g.logsumexp_rows(joint);
        Ok(Forward { h_con, log_w, theta, comp, fused })
    }
}

/// Graph handles produced by [`MagnetModel::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    pub h_con: Var,
    /// `R x k` log fusion weights.
    pub log_w: Var,
    /// Per expert, `R x dim*6` adapted coefficients in the flat layout.
    pub theta: Vec<Var>,
    /// `R x k` per-expert log-densities at the endpoint.
    pub comp: Var,
    /// `R x 1` fused log-density.
    pub fused: Var,
}

/// `P x dim` matrices summing the mean terms and the squared spread terms
/// of each axis.
fn selectors<T: Real>(dim: usize) -> (Tensor<T>, Tensor<T>) {
    let p = dim * COEFFS_PER_AXIS;
    let mut m = Tensor::zeros(&[p, dim]);
    let mut v = Tensor::zeros(&[p, dim]);
    for d in 0..dim {
        for c in 0..3 {
            m.set(d * COEFFS_PER_AXIS + c, d, T::one());
            v.set(d * COEFFS_PER_AXIS + 3 + c, d, T::one());
        }
    }
    (m, v)
}
