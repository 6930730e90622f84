//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every op applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for every node that depends on a trainable leaf.

use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::{gemm_into, Real, Tensor};
use crate::error::{dim_err, MagnetError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    SoftmaxRows(Var, f64),
    LogSoftmaxRows(Var, f64),
    LogSumExpRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    MaxAll(Var, usize),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

/// Batch statistics produced by a training-mode batch-norm, used by the caller
/// to update running statistics after the step.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
    /// Whether parameter leaves are tracked for gradients.
    track_params: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            track_params: true,
        }
    }

    /// A graph whose parameter leaves never require gradients (pure inference).
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Constant input: never differentiated.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (used for input-gradient checks).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf, created once per graph and cached by name.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let entry = store.entry(id);
        let needs = self.track_params && entry.trainable;
        let v = self.push(entry.value.cast(), Op::Leaf, needs);
        self.params.insert(id, v);
        Ok(v)
    }

    /// `(param id, var)` for every parameter leaf in the graph.
    pub fn param_vars(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if self.value(a).len() != self.value(b).len()
            || self.value(a).cols() != self.value(b).cols()
        {
            return Err(dim_err(op, sa, sb));
        }
        Ok(())
    }

    fn map_unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a[m x n] + b[1 x n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.len() != va.cols() {
            return Err(dim_err("add_row", va.shape(), vb.shape()));
        }
        let n = va.cols();
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::AddRow(a, b), ng))
    }

    /// `a[m x n] * b[1 x n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.len() != va.cols() {
            return Err(dim_err("mul_row", va.shape(), vb.shape()));
        }
        let n = va.cols();
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(vb.data()) {
                *x *= y;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MulRow(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.zip(a, b, Op::Div(a, b), |x, y| x / y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ct = T::of(c);
        self.map_unary(a, Op::Scale(a, c), |x| x * ct)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ct = T::of(c);
        self.map_unary(a, Op::AddScalar(a), |x| x + ct)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.map_unary(a, Op::LeakyRelu(a, slope), |x| if x > T::zero() { x } else { x * s })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Sigmoid(a), |x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Square(a), |x| x * x)
    }

    /// Row-wise softmax of `a / tau`.
    pub fn softmax_rows(&mut self, a: Var, tau: f64) -> Result<Var> {
        check_tau(tau)?;
        let value = softmax_rows(self.value(a), tau);
        let ng = self.ng(a);
        Ok(self.push(value, Op::SoftmaxRows(a, tau), ng))
    }

    /// Row-wise log-softmax of `a / tau`.
    pub fn log_softmax_rows(&mut self, a: Var, tau: f64) -> Result<Var> {
        check_tau(tau)?;
        let va = self.value(a);
        let n = va.cols();
        let inv = T::of(1.0 / tau);
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(n) {
            for x in row.iter_mut() {
                *x *= inv;
            }
            let lse = logsumexp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::LogSoftmaxRows(a, tau), ng))
    }

    /// Row-wise log-sum-exp, `m x n -> m x 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.cols();
        let data: Vec<T> = va.data().chunks(n).map(logsumexp).collect();
        let m = data.len();
        let ng = self.ng(a);
        self.push(
            Tensor::new(vec![m, 1], data).expect("shape"),
            Op::LogSumExpRows(a),
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(dim_err(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
            total += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![m, total], data).expect("shape"),
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let n = va.cols();
        if start + len > n {
            return Err(dim_err("slice_cols", va.shape(), &[start, len]));
        }
        let m = va.rows();
        let mut data = Vec::with_capacity(m * len);
        for row in va.data().chunks(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(vec![m, len], data).expect("shape"),
            Op::SliceCols(a, start),
            ng,
        ))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            if i >= m {
                return Err(MagnetError::Input(format!("row index {i} out of {m}")));
            }
            data.extend_from_slice(va.row_slice(i));
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], data).expect("shape"),
            Op::GatherRows(a, idx),
            ng,
        ))
    }

    /// Selects flat elements, producing a column `k x 1`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let va = self.value(a);
        let mut data = Vec::with_capacity(idx.len());
        for &i in &idx {
            if i >= va.len() {
                return Err(MagnetError::Input(format!("index {i} out of {}", va.len())));
            }
            data.push(va.data()[i]);
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(vec![idx.len(), 1], data).expect("shape"),
            Op::Gather(a, idx),
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.sum() / T::of(va.len() as f64);
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), ng)
    }

    /// Row sums, `m x n -> m x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.cols();
        let data: Vec<T> = va
            .data()
            .chunks(n)
            .map(|r| r.iter().fold(T::zero(), |s, &x| s + x))
            .collect();
        let m = data.len();
        let ng = self.ng(a);
        self.push(Tensor::new(vec![m, 1], data).expect("shape"), Op::SumCols(a), ng)
    }

    /// Maximum element; the gradient flows to the first maximizer.
    pub fn max(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut best = 0;
        for (i, &x) in va.data().iter().enumerate() {
            if x > va.data()[best] {
                best = i;
            }
        }
        let m = va.data()[best];
        let ng = self.ng(a);
        self.push(Tensor::scalar(m), Op::MaxAll(a, best), ng)
    }

    /// Training-mode batch normalization over rows with per-column affine
    /// parameters. Returns the output and the batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let vx = self.value(x);
        let (m, n) = (vx.rows(), vx.cols());
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(dim_err("batch_norm", vx.shape(), self.value(gamma).shape()));
        }
        if m < 2 {
            return Err(MagnetError::Input(
                "batch norm in training mode needs at least 2 rows".into(),
            ));
        }
        let mut mean = vec![0.0f64; n];
        let mut var = vec![0.0f64; n];
        for row in vx.data().chunks(n) {
            for (j, &v) in row.iter().enumerate() {
                mean[j] += v.as_f64();
            }
        }
        for mu in &mut mean {
            *mu /= m as f64;
        }
        for row in vx.data().chunks(n) {
            for (j, &v) in row.iter().enumerate() {
                let d = v.as_f64() - mean[j];
                var[j] += d * d;
            }
        }
        let biased: Vec<f64> = var.iter().map(|s| s / m as f64).collect();
        let unbiased: Vec<f64> = var.iter().map(|s| s / (m - 1) as f64).collect();
        let inv_std: Vec<T> = biased.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
        let mut xhat = Vec::with_capacity(m * n);
        for row in vx.data().chunks(n) {
            for (j, &v) in row.iter().enumerate() {
                xhat.push((v - T::of(mean[j])) * inv_std[j]);
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % n] + b[i % n])
            .collect();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let v = self.push(
            Tensor::new(vec![m, n], out).expect("shape"),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        );
        Ok((
            v,
            BatchStats {
                mean,
                var: unbiased,
            },
        ))
    }

    /// Scaled dot-product attention for `batch` independent sequences of
    /// length `seq`, packed as rows `b * seq + t`, split into `heads` heads
    /// along the columns. Inputs are the projected queries, keys and values.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        if vk.shape() != vq.shape() || vv.shape() != vq.shape() {
            return Err(dim_err("attention", vq.shape(), vk.shape()));
        }
        if vq.rows() != batch * seq || heads == 0 || d % heads != 0 {
            return Err(MagnetError::Config(format!(
                "attention over {batch}x{seq} rows with {heads} heads does not fit {:?}",
                vq.shape()
            )));
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); batch * seq * d];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                // SAFETY: strided views stay within the q/k/v/out buffers.
                unsafe {
                    T::gemm(
                        seq,
                        dh,
                        seq,
                        scale,
                        vq.data().as_ptr().add(base),
                        d as isize,
                        1,
                        vk.data().as_ptr().add(base),
                        1,
                        d as isize,
                        T::zero(),
                        p.as_mut_ptr(),
                        seq as isize,
                        1,
                    );
                }
                for row in p.chunks_mut(seq) {
                    softmax_in_place(row);
                }
                unsafe {
                    T::gemm(
                        seq,
                        seq,
                        dh,
                        T::one(),
                        p.as_ptr(),
                        seq as isize,
                        1,
                        vv.data().as_ptr().add(base),
                        d as isize,
                        1,
                        T::zero(),
                        out.as_mut_ptr().add(base),
                        d as isize,
                        1,
                    );
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            Tensor::new(vec![batch * seq, d], out).expect("shape"),
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Attention probabilities of an attention node, laid out as
    /// `[batch][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(MagnetError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn acc<'a>(
        &self,
        grads: &'a mut [Option<Tensor<T>>],
        v: Var,
    ) -> Option<&'a mut Tensor<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        slot.as_mut()
    }

    fn acc_map(
        &self,
        grads: &mut [Option<Tensor<T>>],
        v: Var,
        g: &Tensor<T>,
        f: impl Fn(usize, T) -> T,
    ) {
        if let Some(dst) = self.acc(grads, v) {
            for (i, (d, &gi)) in dst.data_mut().iter_mut().zip(g.data()).enumerate() {
                *d += f(i, gi);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if let Some(da) = self.acc(grads, *a) {
                    gemm_into(false, true, m, n, k, g.data(), vb.data(), da.data_mut(), T::one());
                }
                if let Some(db) = self.acc(grads, *b) {
                    gemm_into(true, false, k, m, n, va.data(), g.data(), db.data_mut(), T::one());
                }
            }
            Op::AddRow(a, b) => {
                self.acc_map(grads, *a, g, |_, gi| gi);
                let n = g.cols();
                if let Some(db) = self.acc(grads, *b) {
                    for row in g.data().chunks(n) {
                        for (d, &gi) in db.data_mut().iter_mut().zip(row) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::MulRow(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let n = g.cols();
                self.acc_map(grads, *a, g, |i, gi| gi * vb.data()[i % n]);
                if let Some(db) = self.acc(grads, *b) {
                    for (row, arow) in g.data().chunks(n).zip(va.data().chunks(n)) {
                        for ((d, &gi), &ai) in db.data_mut().iter_mut().zip(row).zip(arow) {
                            *d += gi * ai;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, *a, g, |_, gi| gi);
                self.acc_map(grads, *b, g, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, g, |_, gi| gi);
                self.acc_map(grads, *b, g, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_map(grads, *a, g, |i, gi| gi * vb[i]);
                self.acc_map(grads, *b, g, |i, gi| gi * va[i]);
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_map(grads, *a, g, |i, gi| gi / vb[i]);
                self.acc_map(grads, *b, g, |i, gi| -gi * va[i] / (vb[i] * vb[i]));
            }
            Op::Scale(a, c) => {
                let c = T::of(*c);
                self.acc_map(grads, *a, g, |_, gi| gi * c);
            }
            Op::AddScalar(a) => self.acc_map(grads, *a, g, |_, gi| gi),
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                let s = T::of(*slope);
                self.acc_map(grads, *a, g, |i, gi| if x[i] > T::zero() { gi } else { gi * s });
            }
            Op::Sigmoid(a) => self.acc_map(grads, *a, g, |i, gi| gi * y[i] * (T::one() - y[i])),
            Op::Tanh(a) => self.acc_map(grads, *a, g, |i, gi| gi * (T::one() - y[i] * y[i])),
            Op::Exp(a) => self.acc_map(grads, *a, g, |i, gi| gi * y[i]),
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.acc_map(grads, *a, g, |i, gi| gi / x[i]);
            }
            Op::Sqrt(a) => self.acc_map(grads, *a, g, |i, gi| gi * T::of(0.5) / y[i]),
            Op::Square(a) => {
                let x = self.value(*a).data();
                self.acc_map(grads, *a, g, |i, gi| gi * T::of(2.0) * x[i]);
            }
            Op::SoftmaxRows(a, tau) => {
                let n = g.cols();
                let inv = T::of(1.0 / tau);
                let mut dx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.data().chunks(n).zip(y.chunks(n)) {
                    let dot = grow.iter().zip(yrow).fold(T::zero(), |s, (&gi, &yi)| s + gi * yi);
                    dx.extend(grow.iter().zip(yrow).map(|(&gi, &yi)| inv * yi * (gi - dot)));
                }
                self.acc_map(grads, *a, g, |i, _| dx[i]);
            }
            Op::LogSoftmaxRows(a, tau) => {
                let n = g.cols();
                let inv = T::of(1.0 / tau);
                let mut dx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.data().chunks(n).zip(y.chunks(n)) {
                    let gs = grow.iter().fold(T::zero(), |s, &gi| s + gi);
                    dx.extend(grow.iter().zip(yrow).map(|(&gi, &yi)| inv * (gi - yi.exp() * gs)));
                }
                self.acc_map(grads, *a, g, |i, _| dx[i]);
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a).data();
                let n = self.value(*a).cols();
                if let Some(da) = self.acc(grads, *a) {
                    for (i, d) in da.data_mut().iter_mut().enumerate() {
                        let r = i / n;
                        *d += g.data()[r] * (x[i] - y[r]).exp();
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(dp) = self.acc(grads, p) {
                        for (drow, grow) in dp.data_mut().chunks_mut(w).zip(g.data().chunks(total)) {
                            for (d, &gi) in drow.iter_mut().zip(&grow[offset..offset + w]) {
                                *d += gi;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let n = self.value(*a).cols();
                let w = g.cols();
                if let Some(da) = self.acc(grads, *a) {
                    for (drow, grow) in da.data_mut().chunks_mut(n).zip(g.data().chunks(w)) {
                        for (d, &gi) in drow[*start..*start + w].iter_mut().zip(grow) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let n = g.cols();
                if let Some(da) = self.acc(grads, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        let drow = &mut da.data_mut()[src * n..(src + 1) * n];
                        for (d, &gi) in drow.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Gather(a, idx) => {
                if let Some(da) = self.acc(grads, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        da.data_mut()[src] += g.data()[r];
                    }
                }
            }
            Op::SumAll(a) => {
                let gi = g.item();
                if let Some(da) = self.acc(grads, *a) {
                    for d in da.data_mut() {
                        *d += gi;
                    }
                }
            }
            Op::MeanAll(a) => {
                let gi = g.item() / T::of(self.value(*a).len() as f64);
                if let Some(da) = self.acc(grads, *a) {
                    for d in da.data_mut() {
                        *d += gi;
                    }
                }
            }
            Op::SumCols(a) => {
                let n = self.value(*a).cols();
                if let Some(da) = self.acc(grads, *a) {
                    for (r, drow) in da.data_mut().chunks_mut(n).enumerate() {
                        for d in drow {
                            *d += g.data()[r];
                        }
                    }
                }
            }
            Op::MaxAll(a, best) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.data_mut()[*best] += g.item();
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = g.cols();
                let m = g.rows();
                let gam = self.value(*gamma).data().to_vec();
                let mut sum_g = vec![T::zero(); n];
                let mut sum_gx = vec![T::zero(); n];
                for (grow, hrow) in g.data().chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        sum_g[j] += grow[j];
                        sum_gx[j] += grow[j] * hrow[j];
                    }
                }
                if let Some(dg) = self.acc(grads, *gamma) {
                    for (d, &s) in dg.data_mut().iter_mut().zip(&sum_gx) {
                        *d += s;
                    }
                }
                if let Some(db) = self.acc(grads, *beta) {
                    for (d, &s) in db.data_mut().iter_mut().zip(&sum_g) {
                        *d += s;
                    }
                }
                let mf = T::of(m as f64);
                self.acc_map(grads, *x, g, |i, gi| {
                    let j = i % n;
                    // dxhat = g * gamma; sums over the batch scale by gamma as well
                    gam[j] * inv_std[j] / mf * (mf * gi - sum_g[j] - xhat[i] * sum_gx[j])
                });
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, *batch, *seq, *heads, probs, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut dq = vec![T::zero(); vq.len()];
        let mut dk = vec![T::zero(); vq.len()];
        let mut dv = vec![T::zero(); vq.len()];
        let mut dp = vec![T::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * d + h * dh;
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                // SAFETY: strided views stay inside their buffers; outputs are
                // distinct local vectors.
                unsafe {
                    // dV = Pᵀ dO
                    T::gemm(
                        seq,
                        seq,
                        dh,
                        T::one(),
                        p.as_ptr(),
                        1,
                        seq as isize,
                        g.data().as_ptr().add(base),
                        d as isize,
                        1,
                        T::one(),
                        dv.as_mut_ptr().add(base),
                        d as isize,
                        1,
                    );
                    // dP = dO Vᵀ
                    T::gemm(
                        seq,
                        dh,
                        seq,
                        T::one(),
                        g.data().as_ptr().add(base),
                        d as isize,
                        1,
                        vv.data().as_ptr().add(base),
                        1,
                        d as isize,
                        T::zero(),
                        dp.as_mut_ptr(),
                        seq as isize,
                        1,
                    );
                }
                for (drow, prow) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                    let dot = drow.iter().zip(prow).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for (x, &pi) in drow.iter_mut().zip(prow) {
                        *x = pi * (*x - dot);
                    }
                }
                unsafe {
                    // dQ = dS K * scale
                    T::gemm(
                        seq,
                        seq,
                        dh,
                        scale,
                        dp.as_ptr(),
                        seq as isize,
                        1,
                        vk.data().as_ptr().add(base),
                        d as isize,
                        1,
                        T::one(),
                        dq.as_mut_ptr().add(base),
                        d as isize,
                        1,
                    );
                    // dK = dSᵀ Q * scale
                    T::gemm(
                        seq,
                        seq,
                        dh,
                        scale,
                        dp.as_ptr(),
                        1,
                        seq as isize,
                        vq.data().as_ptr().add(base),
                        d as isize,
                        1,
                        T::one(),
                        dk.as_mut_ptr().add(base),
                        d as isize,
                        1,
                    );
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(dst) = self.acc(grads, var) {
                for (d, x) in dst.data_mut().iter_mut().zip(buf) {
                    *d += x;
                }
            }
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(MagnetError::Config(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

pub(crate) fn logsumexp<T: Real>(xs: &[T]) -> T {
    let m = xs.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    if m == T::neg_infinity() || !m.is_finite() {
        return m;
    }
    let s = xs.iter().fold(T::zero(), |acc, &x| acc + (x - m).exp());
    m + s.ln()
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

pub(crate) fn softmax_rows<T: Real>(t: &Tensor<T>, tau: f64) -> Tensor<T> {
    let n = t.cols();
    let inv = T::of(1.0 / tau);
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(n) {
        for x in row.iter_mut() {
            *x *= inv;
        }
        softmax_in_place(row);
    }
    out
}
