use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ChannelStats, ACC_CHANNELS, H_CON, USER_FEATURES, VIB_CHANNELS};
use crate::error::{MagnetError, Result};
use crate::nn::{
    dropout, BatchNorm1d, BiGru, ForwardCtx, Graph, Init, Linear, MultiHeadAttention, ParamStore,
    Real, Tensor, Var, LEAKY_SLOPE,
};

pub const HIDDEN: usize = 64;
pub const SERIES_DIM: usize = 128;
pub const HEADS: usize = 8;

/// Profile features -> 64 through one hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserEncoder {
    pub l1: Linear,
    pub l2: Linear,
}

impl UserEncoder {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str) -> Result<Self> {
        Ok(Self {
            l1: Linear::init(store, rng, &format!("{prefix}.l1"), USER_FEATURES, HIDDEN, Init::FanIn)?,
            l2: Linear::init(store, rng, &format!("{prefix}.l2"), HIDDEN, HIDDEN, Init::FanIn)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        self.l2.forward(g, store, h)
    }

    pub fn encode(&self, store: &ParamStore, features: &[f64; USER_FEATURES]) -> Result<Vec<f64>> {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::row(features.to_vec()));
        let y = self.forward(&mut g, store, x)?;
        Ok(g.value(y).data().to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesKind {
    Vib,
    Acc,
}

impl SeriesKind {
    pub fn channels(self) -> usize {
        match self {
            SeriesKind::Vib => VIB_CHANNELS,
            SeriesKind::Acc => ACC_CHANNELS,
        }
    }
}

/// Standardize -> lift to 128 -> 8-head self-attention -> BiGRU(64) -> 128.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesEncoder {
    pub kind: SeriesKind,
    pub prefix: String,
    pub lift: Linear,
    pub attention: MultiHeadAttention,
    pub gru: BiGru,
}

impl SeriesEncoder {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, kind: SeriesKind) -> Result<Self> {
        let c = kind.channels();
        let stats = ChannelStats::identity(c);
        store.insert(&format!("{prefix}.norm.mean"), Tensor::row(stats.mean), false)?;
        store.insert(&format!("{prefix}.norm.std"), Tensor::row(stats.std), false)?;
        Ok(Self {
            kind,
            prefix: prefix.to_string(),
            lift: Linear::init(store, rng, &format!("{prefix}.lift"), c, SERIES_DIM, Init::FanIn)?,
            attention: MultiHeadAttention::init(store, rng, &format!("{prefix}.att"), SERIES_DIM, HEADS)?,
            gru: BiGru::init(store, rng, &format!("{prefix}.gru"), SERIES_DIM, HIDDEN)?,
        })
    }

    pub fn stats(&self, store: &ParamStore) -> Result<ChannelStats> {
        Ok(ChannelStats {
            mean: store.get(&format!("{}.norm.mean", self.prefix))?.data().to_vec(),
            std: store.get(&format!("{}.norm.std", self.prefix))?.data().to_vec(),
        })
    }

    pub fn set_stats(&self, store: &mut ParamStore, stats: &ChannelStats) -> Result<()> {
        let c = self.kind.channels();
        if stats.mean.len() != c || stats.std.len() != c || stats.std.iter().any(|s| !(*s > 0.0)) {
            return Err(MagnetError::Config(format!("invalid {c}-channel statistics {stats:?}")));
        }
        store.set(&format!("{}.norm.mean", self.prefix), Tensor::row(stats.mean.clone()))?;
        store.set(&format!("{}.norm.std", self.prefix), Tensor::row(stats.std.clone()))
    }

    /// Standardized rows of several equal-length series, packed `b * T + t`.
    pub fn standardize<'a>(
        &self,
        store: &ParamStore,
        series: impl IntoIterator<Item = &'a [f64]>,
    ) -> Result<Tensor<f64>> {
        let c = self.kind.channels();
        let stats = self.stats(store)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for row in series {
            if row.len() != c {
                return Err(MagnetError::Input(format!(
                    "{:?} series needs {c} channels, got {}",
                    self.kind,
                    row.len()
                )));
            }
            stats.apply(row, &mut data);
            rows += 1;
        }
        Tensor::matrix(rows, c, data)
    }

    /// `x` holds `batch` standardized series of length `seq`; returns
    /// `batch x 128`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        x: Var,
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        if seq == 0 {
            return Err(MagnetError::Input("series encoder needs T >= 1".into()));
        }
        if g.value(x).cols() != self.kind.channels() {
            return Err(MagnetError::Input(format!(
                "{:?} series needs {} channels, got {}",
                self.kind,
                self.kind.channels(),
                g.value(x).cols()
            )));
        }
        let lifted = self.lift.forward(g, store, x)?;
        let (att, _) = self.attention.run(g, store, lifted, batch, seq)?;
        self.gru.run(g, store, att, batch, seq)
    }

    /// Eval-mode encoding of one raw `T x channels` series.
    pub fn encode(&self, store: &ParamStore, series: &[&[f64]]) -> Result<Vec<f64>> {
        let x = self.standardize(store, series.iter().copied())?;
        let mut g = Graph::<f64>::inference();
        let xv = g.constant(x);
        let y = self.forward(&mut g, store, xv, 1, series.len())?;
        Ok(g.value(y).data().to_vec())
    }
}

/// Target features -> 64 through one hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetEncoder {
    pub l1: Linear,
    pub l2: Linear,
}

impl TargetEncoder {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, features: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::init(store, rng, &format!("{prefix}.l1"), features, HIDDEN, Init::FanIn)?,
            l2: Linear::init(store, rng, &format!("{prefix}.l2"), HIDDEN, HIDDEN, Init::FanIn)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        self.l2.forward(g, store, h)
    }

    pub fn encode(&self, store: &ParamStore, features: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::row(features.to_vec()));
        let y = self.forward(&mut g, store, x)?;
        Ok(g.value(y).data().to_vec())
    }
}

/// 384 -> 128 -> BN -> LeakyReLU -> Dropout -> 64 -> LeakyReLU -> k logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CawHead {
    pub l1: Linear,
    pub bn: BatchNorm1d,
    pub l2: Linear,
    pub l3: Linear,
    pub k: usize,
    pub dropout: f64,
}

impl CawHead {
    /// The output layer starts at zero, so initial weights are uniform.
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(MagnetError::Config("weighting head needs k >= 1".into()));
        }
        Ok(Self {
            l1: Linear::init(store, rng, &format!("{prefix}.l1"), H_CON, 128, Init::FanIn)?,
            bn: BatchNorm1d::init(store, &format!("{prefix}.bn"), 128)?,
            l2: Linear::init(store, rng, &format!("{prefix}.l2"), 128, HIDDEN, Init::FanIn)?,
            l3: Linear::init(store, rng, &format!("{prefix}.l3"), HIDDEN, k, Init::Zero)?,
            k,
            dropout: 0.1,
        })
    }

    pub fn logits<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        h_con: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let h = self.l1.forward(g, store, h_con)?;
        let h = self.bn.forward(g, store, h, ctx)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = dropout(g, h, self.dropout, ctx)?;
        let h = self.l2.forward(g, store, h)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        self.l3.forward(g, store, h)
    }

    /// Eval-mode fusion weights for one `h_con`.
    pub fn weights(&self, store: &ParamStore, h_con: &[f64], tau: f64, k: usize) -> Result<Vec<f64>> {
        if k != self.k {
            return Err(MagnetError::Config(format!(
                "weighting head has {} outputs but the registry has {k} experts",
                self.k
            )));
        }
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::row(h_con.to_vec()));
        let l = self.logits(&mut g, store, x, &mut ForwardCtx::eval())?;
        let w = g.softmax_rows(l, tau)?;
        Ok(g.value(w).data().to_vec())
    }
}
