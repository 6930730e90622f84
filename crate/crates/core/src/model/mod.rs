//! The MAGNeT model: context encoders, fusion weights, per-target expert
//! adaptation and Gaussian-mixture fusion, with its losses, training loop
//! and prediction records.

mod forward;
mod predict;
mod train;

pub use forward::{Batch, Forward};
pub use predict::{
    diversity_loss, gmm_log_density, mean_off_diagonal, ranking_hinge, AdaptedMoments,
    PredictionRecord,
};
pub use train::{EarlyStopper, EpochLog, NegativeMode, StopDecision, TrainConfig, TrainLog};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::TrialRecord;
use crate::encoders::{
    CawHead, ChannelStats, EnvWindow, NormConfig, SeriesEncoder, SeriesKind, TargetEncoder,
    TaskGeometry, UserEncoder, H_CON,
};
use crate::error::{MagnetError, Result};
use crate::experts::ExpertRegistry;
use crate::gaussian::{ternary_moments, COEFFS_PER_AXIS};
use crate::nn::{Checkpoint, CheckpointMeta, Init, Linear, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Fusion-weight temperature.
    pub tau: f64,
    /// Bound on mean-coefficient shifts, in units of `endpoint_scale`.
    pub rho_mu: f64,
    /// Bound on `|log(sigma' / sigma)|`.
    pub rho_sigma: f64,
    /// Endpoint-unit scale for mean shifts; `None` derives it from the
    /// registry when the model is built, after which it is always set.
    pub endpoint_scale: Option<f64>,
    /// Rate the series encoders consume; windows are resampled to it.
    pub rate_hz: f64,
    pub geometry: TaskGeometry,
    pub norm: NormConfig,
    pub caw_dropout: f64,
}

impl ModelConfig {
    pub fn for_dim(dim: usize) -> Self {
        Self {
            tau: 2.0,
            rho_mu: 0.5,
            rho_sigma: 0.5,
            endpoint_scale: None,
            rate_hz: 10.0,
            geometry: if dim == 3 { TaskGeometry::scene_3d() } else { TaskGeometry::screen_2d() },
            norm: NormConfig::default(),
            caw_dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !pos(self.tau) {
            return Err(MagnetError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.rho_mu >= 0.0) || !(self.rho_sigma >= 0.0) {
            return Err(MagnetError::Config("adaptation bounds must be >= 0".into()));
        }
        if !pos(self.rate_hz) || EnvWindow::samples_for(self.rate_hz) == 0 {
            return Err(MagnetError::Config(format!("series rate {} Hz is unusable", self.rate_hz)));
        }
        if !(0.0..1.0).contains(&self.caw_dropout) {
            return Err(MagnetError::Config(format!("dropout {} outside [0, 1)", self.caw_dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nets {
    pub user: UserEncoder,
    pub vib: SeriesEncoder,
    pub acc: SeriesEncoder,
    pub target: TargetEncoder,
    pub caw: CawHead,
    pub adapt_hidden: Linear,
    pub adapt_out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MagnetModel {
    pub config: ModelConfig,
    pub registry: ExpertRegistry,
    pub nets: Nets,
    pub store: ParamStore,
    /// Resolved endpoint scale (px in 2D, m in 3D).
    pub endpoint_scale: f64,
}

impl MagnetModel {
    /// Fresh model; parameter initialization is a pure function of `seed`.
    pub fn new(mut config: ModelConfig, registry: ExpertRegistry, seed: u64) -> Result<Self> {
        config.validate()?;
        let dim = registry.dim();
        if dim != config.geometry.dim() {
            return Err(MagnetError::Config(format!(
                "registry is {dim}D but the task geometry is {}D",
                config.geometry.dim()
            )));
        }
        for e in registry.experts() {
            if e.params.sigma.iter().any(|s| !(s[0] > 0.0)) {
                return Err(MagnetError::Config(format!(
                    "expert {:?} needs a positive absolute spread on every axis",
                    e.id
                )));
            }
        }
        let endpoint_scale = match config.endpoint_scale {
            Some(s) if s > 0.0 && s.is_finite() => s,
            Some(s) => return Err(MagnetError::Config(format!("endpoint scale {s} must be > 0"))),
            None => default_endpoint_scale(&registry, &config.geometry)?,
        };
        config.endpoint_scale = Some(endpoint_scale);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = registry.len();
        let p = dim * COEFFS_PER_AXIS;
        let target_dim = config.geometry.target_features();
        let mut caw = CawHead::init(&mut store, &mut rng, "caw", k)?;
        caw.dropout = config.caw_dropout;
        let nets = Nets {
            user: UserEncoder::init(&mut store, &mut rng, "user")?,
            vib: SeriesEncoder::init(&mut store, &mut rng, "vib", SeriesKind::Vib)?,
            acc: SeriesEncoder::init(&mut store, &mut rng, "acc", SeriesKind::Acc)?,
            target: TargetEncoder::init(&mut store, &mut rng, "target", target_dim)?,
            caw,
            adapt_hidden: Linear::init(&mut store, &mut rng, "adapt.l1", H_CON + 64, 64, Init::FanIn)?,
            adapt_out: Linear::init(&mut store, &mut rng, "adapt.l2", 64, k * p, Init::Zero)?,
        };
        Ok(Self { config, registry, nets, store, endpoint_scale })
    }

    pub fn dim(&self) -> usize {
        self.registry.dim()
    }

    pub fn k(&self) -> usize {
        self.registry.len()
    }

    /// Freezes per-channel standardization statistics from `trials`.
    pub fn fit_normalization(&mut self, trials: &[TrialRecord]) -> Result<()> {
        let windows: Vec<EnvWindow> = trials
            .iter()
            .filter_map(|t| t.env.as_ref())
            .map(|w| w.resample(self.config.rate_hz))
            .collect::<Result<_>>()?;
        if windows.is_empty() {
            return Ok(());
        }
        let vib = ChannelStats::fit(windows.iter().flat_map(|w| w.vib.iter().map(|r| r.as_slice())), 12)?;
        let acc = ChannelStats::fit(windows.iter().flat_map(|w| w.acc.iter().map(|r| r.as_slice())), 3)?;
        self.nets.vib.set_stats(&mut self.store, &vib)?;
        self.nets.acc.set_stats(&mut self.store, &acc)
    }

    /// Zeroes the final weighting and adaptation layers: uniform fusion
    /// weights and unadapted experts.
    pub fn reset_heads(&mut self) -> Result<()> {
        for l in [&self.nets.caw.l3, &self.nets.adapt_out] {
            for name in [l.weight_name(), l.bias_name()] {
                let t = self.store.get_mut(&name)?;
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        Ok(())
    }

    /// SHA-256 over the model config and registry documents.
    pub fn config_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config)?);
        h.update(self.registry.to_json()?.as_bytes());
        Ok(hex::encode(h.finalize()))
    }

    pub fn to_checkpoint(&self, seed: u64, epoch: usize) -> Result<Checkpoint> {
        let mut meta = CheckpointMeta {
            seed,
            epoch,
            config_hash: self.config_hash()?,
            ..Default::default()
        };
        meta.extra.insert("model_config".into(), serde_json::to_string(&self.config)?);
        meta.extra.insert("registry".into(), self.registry.to_json()?);
        Ok(Checkpoint { meta, params: self.store.clone(), optim: None })
    }

    /// Rebuilds the architecture from the embedded config and registry and
    /// loads every parameter, checking names and shapes.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let doc = |key: &str| {
            ck.meta
                .extra
                .get(key)
                .ok_or_else(|| MagnetError::Parse { expected: crate::nn::checkpoint::CHECKPOINT_VERSION, msg: format!("checkpoint lacks {key}") })
        };
        let config: ModelConfig = serde_json::from_str(doc("model_config")?)?;
        let registry = ExpertRegistry::from_json(doc("registry")?)?;
        let mut model = Self::new(config, registry, 0)?;
        let fresh = &model.store;
        if fresh.len() != ck.params.len() {
            return Err(MagnetError::Validation(format!(
                "checkpoint has {} tensors, the architecture needs {}",
                ck.params.len(),
                fresh.len()
            )));
        }
        for (a, b) in fresh.entries().iter().zip(ck.params.entries()) {
            if a.name != b.name || a.value.shape() != b.value.shape() || a.trainable != b.trainable {
                return Err(MagnetError::Validation(format!(
                    "checkpoint tensor {} {:?} does not match architecture tensor {} {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        model.store = ck.params.clone();
        if model.config_hash()? != ck.meta.config_hash {
            return Err(MagnetError::Validation("checkpoint config hash mismatch".into()));
        }
        Ok(model)
    }

    /// Per-coefficient scale of mean shifts in the flat layout, and the
    /// masks that route deltas to mean (additive) or spread (log) updates.
    pub(crate) fn adaptation_rows(&self) -> (Vec<f64>, Vec<f64>) {
        let geo = &self.config.geometry;
        let e = self.endpoint_scale;
        let mut add = Vec::new();
        let mut log = Vec::new();
        for _ in 0..self.dim() {
            for s in [e, e / geo.v_ref, e / geo.w_ref] {
                add.push(self.config.rho_mu * s);
                log.push(0.0);
            }
            for _ in 0..3 {
                add.push(0.0);
                log.push(self.config.rho_sigma);
            }
        }
        (add, log)
    }

    /// Per-coefficient scales used to compare parameter vectors across units.
    pub(crate) fn coefficient_scales(&self) -> Vec<f64> {
        let geo = &self.config.geometry;
        let e = self.endpoint_scale;
        (0..self.dim())
            .flat_map(|_| [e, e / geo.v_ref, e / geo.w_ref, e, e / geo.v_ref, e / geo.w_ref])
            .collect()
    }
}

/// Mean predicted spread over experts and axes at the reference size and speed.
fn default_endpoint_scale(reg: &ExpertRegistry, geo: &TaskGeometry) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0.0;
    for e in reg.experts() {
        for m in ternary_moments(&e.params, geo.v_ref, geo.w_ref)? {
            total += m.var.sqrt();
            n += 1.0;
        }
    }
    Ok(total / n)
}
