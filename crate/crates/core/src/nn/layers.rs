//! The layer set the model needs: linear maps, batch norm, dropout, GRU,
//! bidirectional GRU and multi-head self-attention.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{BatchStats, Graph, Var};
use super::params::{fan_in_uniform, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{MagnetError, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward mutable state: mode, dropout randomness and the batch-norm
/// statistics to fold into running averages once the step completes.
pub struct ForwardCtx<'a> {
    pub mode: Mode,
    /// `None` in training mode freezes dropout (identity).
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
    pub bn_stats: Vec<(String, BatchStats)>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            dropout_rng: None,
            bn_stats: Vec::new(),
        }
    }

    pub fn train(rng: Option<&'a mut ChaCha8Rng>) -> Self {
        Self {
            mode: Mode::Train,
            dropout_rng: rng,
            bn_stats: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    FanIn,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub prefix: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
    ) -> Result<Self> {
        let w = match init {
            Init::FanIn => fan_in_uniform(rng, &[d_in, d_out], d_in),
            Init::Zero => Tensor::zeros(&[d_in, d_out]),
        };
        store.insert(&format!("{prefix}.weight"), w, true)?;
        store.insert(&format!("{prefix}.bias"), Tensor::zeros(&[1, d_out]), true)?;
        Ok(Self {
            prefix: prefix.to_string(),
            d_in,
            d_out,
        })
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.d_in {
            return Err(crate::error::dim_err(
                "linear",
                g.value(x).shape(),
                &[self.d_in, self.d_out],
            ));
        }
        let w = g.param(store, &self.weight_name())?;
        let b = g.param(store, &self.bias_name())?;
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }

    /// `y = xW + b` on a plain tensor.
    pub fn apply(&self, store: &ParamStore, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut g = Graph::<f64>::inference();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, store, xv)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm1d {
    pub prefix: String,
    pub dim: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        store.insert(&format!("{prefix}.gamma"), Tensor::filled(&[1, dim], 1.0), true)?;
        store.insert(&format!("{prefix}.beta"), Tensor::zeros(&[1, dim]), true)?;
        store.insert(&format!("{prefix}.running_mean"), Tensor::zeros(&[1, dim]), false)?;
        store.insert(
            &format!("{prefix}.running_var"),
            Tensor::filled(&[1, dim], 1.0),
            false,
        )?;
        Ok(Self {
            prefix: prefix.to_string(),
            dim,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        x: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let gamma = g.param(store, &format!("{}.gamma", self.prefix))?;
        let beta = g.param(store, &format!("{}.beta", self.prefix))?;
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                ctx.bn_stats.push((self.prefix.clone(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let rm = store.get(&format!("{}.running_mean", self.prefix))?;
                let rv = store.get(&format!("{}.running_var", self.prefix))?;
                let shift = g.constant(rm.map(|m| -m).cast());
                let inv = g.constant(rv.map(|v| 1.0 / (v + self.eps).sqrt()).cast());
                let centered = g.add_row(x, shift)?;
                let xn = g.mul_row(centered, inv)?;
                let scaled = g.mul_row(xn, gamma)?;
                g.add_row(scaled, beta)
            }
        }
    }

    /// Folds batch statistics into the running averages.
    pub fn update_running(&self, store: &mut ParamStore, stats: &BatchStats) -> Result<()> {
        let m = self.momentum;
        let rm = store.get_mut(&format!("{}.running_mean", self.prefix))?;
        for (r, &b) in rm.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        let rv = store.get_mut(&format!("{}.running_var", self.prefix))?;
        for (r, &b) in rv.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
        Ok(())
    }
}

/// Inverted dropout; identity in eval mode or without a mask source.
pub fn dropout<T: Real>(g: &mut Graph<T>, x: Var, p: f64, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
    if ctx.mode == Mode::Eval || p <= 0.0 {
        return Ok(x);
    }
    let Some(rng) = ctx.dropout_rng.as_deref_mut() else {
        return Ok(x);
    };
    let keep = 1.0 - p;
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).len();
    let mask: Vec<T> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < keep {
                T::of(1.0 / keep)
            } else {
                T::zero()
            }
        })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

/// One direction of a GRU with gate order (reset, update, new).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub prefix: String,
    pub d_in: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_in: usize,
        hidden: usize,
    ) -> Result<Self> {
        let h3 = 3 * hidden;
        store.insert(
            &format!("{prefix}.w_ih"),
            fan_in_uniform(rng, &[d_in, h3], hidden),
            true,
        )?;
        store.insert(
            &format!("{prefix}.w_hh"),
            fan_in_uniform(rng, &[hidden, h3], hidden),
            true,
        )?;
        store.insert(&format!("{prefix}.b_ih"), Tensor::zeros(&[1, h3]), true)?;
        store.insert(&format!("{prefix}.b_hh"), Tensor::zeros(&[1, h3]), true)?;
        Ok(Self {
            prefix: prefix.to_string(),
            d_in,
            hidden,
        })
    }

    /// Runs the cell over `batch` sequences of length `seq` packed as rows
    /// `b * seq + t`. Returns the final hidden state `batch x hidden`.
    pub fn run<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        x: Var,
        batch: usize,
        seq: usize,
        reverse: bool,
    ) -> Result<Var> {
        let hd = self.hidden;
        let w_ih = g.param(store, &format!("{}.w_ih", self.prefix))?;
        let w_hh = g.param(store, &format!("{}.w_hh", self.prefix))?;
        let b_ih = g.param(store, &format!("{}.b_ih", self.prefix))?;
        let b_hh = g.param(store, &format!("{}.b_hh", self.prefix))?;
        let xw = g.matmul(x, w_ih)?;
        let xi_all = g.add_row(xw, b_ih)?;
        let mut h = g.constant(Tensor::zeros(&[batch, hd]));
        for step in 0..seq {
            let t = if reverse { seq - 1 - step } else { step };
            let rows: Vec<usize> = (0..batch).map(|b| b * seq + t).collect();
            let xi = g.gather_rows(xi_all, rows)?;
            let hw = g.matmul(h, w_hh)?;
            let gh = g.add_row(hw, b_hh)?;
            let xi_rz = g.slice_cols(xi, 0, 2 * hd)?;
            let gh_rz = g.slice_cols(gh, 0, 2 * hd)?;
            let rz_pre = g.add(xi_rz, gh_rz)?;
            let rz = g.sigmoid(rz_pre);
            let r = g.slice_cols(rz, 0, hd)?;
            let z = g.slice_cols(rz, hd, hd)?;
            let xi_n = g.slice_cols(xi, 2 * hd, hd)?;
            let gh_n = g.slice_cols(gh, 2 * hd, hd)?;
            let rg = g.mul(r, gh_n)?;
            let n_pre = g.add(xi_n, rg)?;
            let n = g.tanh(n_pre);
            // h' = (1 - z) * n + z * h = n + z * (h - n)
            let diff = g.sub(h, n)?;
            let zd = g.mul(z, diff)?;
            h = g.add(n, zd)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiGru {
    pub forward: GruCell,
    pub backward: GruCell,
}

impl BiGru {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_in: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            forward: GruCell::init(store, rng, &format!("{prefix}.fwd"), d_in, hidden)?,
            backward: GruCell::init(store, rng, &format!("{prefix}.bwd"), d_in, hidden)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    /// Concatenated final states of both directions, `batch x 2*hidden`.
    pub fn run<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        x: Var,
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        if seq == 0 || batch == 0 {
            return Err(MagnetError::Input("GRU needs a non-empty sequence".into()));
        }
        if g.value(x).cols() != self.forward.d_in || g.value(x).rows() != batch * seq {
            return Err(crate::error::dim_err(
                "bigru",
                g.value(x).shape(),
                &[batch * seq, self.forward.d_in],
            ));
        }
        let hf = self.forward.run(g, store, x, batch, seq, false)?;
        let hb = self.backward.run(g, store, x, batch, seq, true)?;
        g.concat_cols(&[hf, hb])
    }

    /// Single-sequence convenience form: `[T x d] -> [2*hidden]`.
    pub fn apply(&self, store: &ParamStore, seq: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(seq.clone());
        let y = self.run(&mut g, store, x, 1, seq.rows())?;
        Ok(g.value(y).clone())
    }
}

/// Multi-head self-attention with a residual connection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(MagnetError::Config(format!(
                "attention dim {dim} is not divisible into {heads} heads"
            )));
        }
        let mk = |store: &mut ParamStore, rng: &mut _, n: &str| {
            Linear::init(store, rng, &format!("{prefix}.{n}"), dim, dim, Init::FanIn)
        };
        Ok(Self {
            q: mk(store, rng, "q")?,
            k: mk(store, rng, "k")?,
            v: mk(store, rng, "v")?,
            o: mk(store, rng, "o")?,
            dim,
            heads,
        })
    }

    /// Returns `(output, attention node)`; the attention node exposes the
    /// per-head probabilities through [`Graph::attention_probs`].
    pub fn run<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        x: Var,
        batch: usize,
        seq: usize,
    ) -> Result<(Var, Var)> {
        if g.value(x).cols() != self.dim {
            return Err(MagnetError::Config(format!(
                "attention expects feature dim {}, got {}",
                self.dim,
                g.value(x).cols()
            )));
        }
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let att = g.attention(q, k, v, batch, seq, self.heads)?;
        let o = self.o.forward(g, store, att)?;
        let y = g.add(o, x)?;
        Ok((y, att))
    }

    /// Single-sequence convenience form: `[T x dim] -> ([T x dim], probs)`.
    pub fn apply(
        &self,
        store: &ParamStore,
        seq: &Tensor<f64>,
    ) -> Result<(Tensor<f64>, Vec<f64>)> {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(seq.clone());
        let (y, att) = self.run(&mut g, store, x, 1, seq.rows())?;
        let probs = g.attention_probs(att).unwrap_or_default().to_vec();
        Ok((g.value(y).clone(), probs))
    }
}

/// Temperature softmax `exp(l_i / tau) / sum_j exp(l_j / tau)`.
pub fn softmax_t(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(MagnetError::Config(format!("temperature must be > 0, got {tau}")));
    }
    if logits.is_empty() {
        return Err(MagnetError::Input("softmax over an empty vector".into()));
    }
    let t = Tensor::row(logits.to_vec());
    Ok(super::graph::softmax_rows(&t, tau).into_data())
}
