use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Batch, Forward, MagnetModel};
use crate::datagen::TrialRecord;
use crate::error::{MagnetError, Result};
use crate::nn::{adamw_step, cosine_lr, param_grads, AdamWConfig, ForwardCtx, Graph, OptimState, ParamStore, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// Hinge against the distractor with the highest fused density.
    Hardest,
    /// Hinge averaged over all distractors.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub margin: f64,
    pub lambda_div: f64,
    pub negatives: NegativeMode,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_dim(dim: usize) -> Self {
        Self {
            batch_size: if dim == 3 { 16 } else { 32 },
            max_epochs: 50,
            patience: 10,
            lr: 5e-4,
            weight_decay: 1e-4,
            margin: 1.0,
            lambda_div: 0.1,
            negatives: NegativeMode::Hardest,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(MagnetError::Config("batch size and epochs must be >= 1".into()));
        }
        if self.patience > self.max_epochs {
            return Err(MagnetError::Config(format!(
                "patience {} exceeds max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.margin >= 0.0) || !(self.lambda_div >= 0.0) {
            return Err(MagnetError::Config(format!("invalid optimizer or loss settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the loss has failed to decrease for `patience` consecutive
/// epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

impl MagnetModel {
    /// Mean hinge `max(0, margin + log p_neg - log p_pos)` over labelled
    /// trials. Trials without distractors contribute 0.
    pub fn ranking_loss_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        fwd: &Forward,
        batch: &Batch,
        margin: f64,
        mode: NegativeMode,
    ) -> Result<Var> {
        let mut terms = Vec::with_capacity(batch.trials);
        for (i, rows) in batch.rows.iter().enumerate() {
            let pos = batch.positive[i].ok_or_else(|| {
                MagnetError::Input(format!("trial {i} of the batch has no intended target"))
            })?;
            let negs: Vec<usize> = rows.clone().filter(|&r| r != pos).collect();
            if negs.is_empty() {
                tracing::warn!("single-target trial has no negatives; ranking loss is 0");
                terms.push(g.constant(crate::nn::Tensor::scalar(T::zero())));
                continue;
            }
            let term = match mode {
                NegativeMode::Hardest => {
                    let p = g.gather(fwd.fused, vec![pos])?;
                    let n = g.gather(fwd.fused, negs)?;
                    let hard = g.max(n);
                    let d = g.sub(hard, p)?;
                    let d = g.add_scalar(d, margin);
                    g.relu(d)
                }
                NegativeMode::Mean => {
                    let p = g.gather(fwd.fused, vec![pos; negs.len()])?;
                    let n = g.gather(fwd.fused, negs)?;
                    let d = g.sub(n, p)?;
                    let d = g.add_scalar(d, margin);
                    let h = g.relu(d);
                    g.mean(h)
                }
            };
            terms.push(term);
        }
        let all = g.concat_cols(&terms)?;
        Ok(g.mean(all))
    }

    /// Mean pairwise cosine similarity of the adapted experts, per target row
    /// and then averaged over rows. Coefficients are divided by their unit
    /// scales first so speed and size terms are comparable with offsets.
    pub fn diversity_loss_graph<T: Real>(&self, g: &mut Graph<T>, fwd: &Forward) -> Result<Option<Var>> {
        let k = fwd.theta.len();
        if k < 2 {
            return Ok(None);
        }
        let inv: Vec<f64> = self.coefficient_scales().iter().map(|s| 1.0 / s).collect();
        let inv = g.constant(crate::nn::Tensor::row(inv).cast());
        let mut unit = Vec::with_capacity(k);
        let mut sq = Vec::with_capacity(k);
        for &t in &fwd.theta {
            let u = g.mul_row(t, inv)?;
            let s = g.square(u);
            sq.push(g.sum_cols(s));
            unit.push(u);
        }
        let mut sims = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                let prod = g.mul(unit[i], unit[j])?;
                let dot = g.sum_cols(prod);
                let nn = g.mul(sq[i], sq[j])?;
                // zero vectors give dot = 0, so the pair contributes 0
                let nn = g.add_scalar(nn, 1e-24);
                let norm = g.sqrt(nn);
                sims.push(g.div(dot, norm)?);
            }
        }
        let all = g.concat_cols(&sims)?;
        Ok(Some(g.mean(all)))
    }

    /// `L_rank + lambda_div * L_div` for one prepared batch.
    pub fn total_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        batch: &Batch,
        ctx: &mut ForwardCtx<'_>,
        cfg: &TrainConfig,
    ) -> Result<Var> {
        let fwd = self.forward(g, batch, ctx)?;
        let rank = self.ranking_loss_graph(g, &fwd, batch, cfg.margin, cfg.negatives)?;
        match self.diversity_loss_graph(g, &fwd)? {
            Some(div) if cfg.lambda_div > 0.0 => {
                let d = g.scale(div, cfg.lambda_div);
                g.add(rank, d)
            }
            _ => Ok(rank),
        }
    }

    /// Mean total loss over `trials` in eval mode.
    pub fn evaluate_loss(&self, trials: &[&TrialRecord], cfg: &TrainConfig) -> Result<f64> {
        if trials.is_empty() {
            return Err(MagnetError::Config("empty evaluation split".into()));
        }
        let mut total = 0.0;
        for chunk in trials.chunks(cfg.batch_size.max(64)) {
            let batch = self.prepare_batch(chunk)?;
            let mut g = Graph::<f32>::inference();
            let loss = self.total_loss(&mut g, &batch, &mut ForwardCtx::eval(), cfg)?;
            total += g.value(loss).item() as f64 * chunk.len() as f64;
        }
        Ok(total / trials.len() as f64)
    }

    /// Few-shot training with AdamW, cosine schedule and early stopping on
    /// the validation loss. The best-validation parameters are restored.
    pub fn train(&mut self, train: &[TrialRecord], val: &[TrialRecord], cfg: &TrainConfig) -> Result<TrainLog> {
        cfg.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(MagnetError::Config(format!(
                "training needs non-empty splits, got {} train and {} validation trials",
                train.len(),
                val.len()
            )));
        }
        for t in train.iter().chain(val) {
            t.validate()?;
        }
        self.fit_normalization(train)?;
        let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut opt = OptimState::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        });
        let val_refs: Vec<&TrialRecord> = val.iter().collect();
        let mut stopper = EarlyStopper::new(cfg.patience);
        let mut best: ParamStore = self.store.clone();
        let mut log = TrainLog {
            seed: cfg.seed,
            epochs: Vec::new(),
            best_epoch: 0,
            best_val_loss: f64::INFINITY,
            stopped_early: false,
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..cfg.max_epochs {
            let lr = cosine_lr(epoch, cfg.max_epochs, cfg.lr)?;
            order.shuffle(&mut order_rng);
            let mut sum = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let trials: Vec<&TrialRecord> = chunk.iter().map(|&i| &train[i]).collect();
                let batch = self.prepare_batch(&trials)?;
                let mut g = Graph::<f32>::new();
                let mut ctx = ForwardCtx::train(Some(&mut drop_rng));
                let loss = self.total_loss(&mut g, &batch, &mut ctx, cfg)?;
                let value = g.value(loss).item() as f64;
                if !value.is_finite() {
                    return Err(MagnetError::Numeric(format!(
                        "non-finite training loss {value} at epoch {epoch}"
                    )));
                }
                sum += value * chunk.len() as f64;
                let grads = g.backward(loss)?;
                let pg = param_grads(&g, &grads, &self.store);
                adamw_step(&mut self.store, &pg, &mut opt, lr)?;
                let stats = std::mem::take(&mut ctx.bn_stats);
                drop(ctx);
                for (prefix, st) in &stats {
                    if *prefix == self.nets.caw.bn.prefix {
                        let bn = self.nets.caw.bn.clone();
                        bn.update_running(&mut self.store, st)?;
                    }
                }
            }
            let val_loss = self.evaluate_loss(&val_refs, cfg)?;
            if !val_loss.is_finite() {
                return Err(MagnetError::Numeric(format!(
                    "non-finite validation loss at epoch {epoch}"
                )));
            }
            log.epochs.push(EpochLog {
                epoch,
                lr,
                train_loss: sum / train.len() as f64,
                val_loss,
            });
            tracing::debug!(epoch, train = sum / train.len() as f64, val_loss, "epoch");
            match stopper.observe(epoch, val_loss) {
                StopDecision::Improved => best = self.store.clone(),
                StopDecision::Continue => {}
                StopDecision::Stop => {
                    log.stopped_early = true;
                    break;
                }
            }
        }
        self.store = best;
        log.best_epoch = stopper.best_epoch;
        log.best_val_loss = stopper.best;
        Ok(log)
    }
}
