use serde::{Deserialize, Serialize};

use super::{MagnetModel, NegativeMode};
use crate::datagen::TrialRecord;
use crate::error::{MagnetError, Result};
use crate::gaussian::{gaussian_pred, log_pdf, rank_by_score, ternary_moments, TargetState, TernaryGaussianParams};
use crate::nn::graph::logsumexp;
use crate::nn::{ForwardCtx, Graph};

/// Moments of one adapted expert for one target, in the target frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptedMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub trial_id: u64,
    /// Input order.
    pub target_ids: Vec<u32>,
    /// Fused log-density at the endpoint, input order.
    #[serde(with = "nonfinite")]
    pub log_density: Vec<f64>,
    /// Target ids by descending fused density, ties to the lowest id.
    pub ranking: Vec<u32>,
    pub expert_ids: Vec<String>,
    /// Fusion weights per target (input order), one entry per expert.
    pub weights: Vec<Vec<f64>>,
    /// Adapted moments per target, per expert.
    pub adapted: Vec<Vec<AdaptedMoments>>,
    /// The motion window was absent and replaced by zeros.
    pub env_missing: bool,
}

impl PredictionRecord {
    /// 1-based rank of `id`, if present.
    pub fn rank_of(&self, id: u32) -> Option<usize> {
        self.ranking.iter().position(|&x| x == id).map(|i| i + 1)
    }
}

/// `log sum_k w_k N(s; phi(t, theta_k))` for one target.
pub fn gmm_log_density(
    target: &TargetState,
    s: &[f64],
    weights: &[f64],
    experts: &[TernaryGaussianParams],
) -> Result<f64> {
    if weights.len() != experts.len() || experts.is_empty() {
        return Err(MagnetError::Config(format!(
            "{} weights for {} experts",
            weights.len(),
            experts.len()
        )));
    }
    let terms = weights
        .iter()
        .zip(experts)
        .map(|(w, p)| Ok(w.ln() + log_pdf(&gaussian_pred(target, p)?, s)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(logsumexp(&terms))
}

/// Mean of the off-diagonal entries of a square similarity matrix, i.e. the
/// average over the `k(k-1)` ordered pairs.
pub fn mean_off_diagonal(sim: &[Vec<f64>]) -> f64 {
    let k = sim.len();
    if k < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for (i, row) in sim.iter().enumerate() {
        for (j, x) in row.iter().enumerate() {
            if i != j {
                total += x;
            }
        }
    }
    total / (k * (k - 1)) as f64
}

/// Mean pairwise cosine similarity of flattened parameter vectors; 0 for a
/// single expert. Zero vectors contribute 0.
pub fn diversity_loss(params: &[Vec<f64>]) -> f64 {
    let norms: Vec<f64> = params.iter().map(|p| p.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let sim: Vec<Vec<f64>> = params
        .iter()
        .enumerate()
        .map(|(i, a)| {
            params
                .iter()
                .enumerate()
                .map(|(j, b)| {
                    if norms[i] == 0.0 || norms[j] == 0.0 {
                        if i != j {
                            tracing::warn!("zero-norm expert parameters in diversity loss");
                        }
                        return 0.0;
                    }
                    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norms[i] * norms[j])
                })
                .collect()
        })
        .collect();
    mean_off_diagonal(&sim)
}

/// Hinge of one trial given the positive and distractor log-densities.
pub fn ranking_hinge(pos: f64, negs: &[f64], margin: f64, mode: NegativeMode) -> f64 {
    if negs.is_empty() {
        return 0.0;
    }
    match mode {
        NegativeMode::Hardest => {
            let hard = negs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (margin + hard - pos).max(0.0)
        }
        NegativeMode::Mean => {
            negs.iter().map(|n| (margin + n - pos).max(0.0)).sum::<f64>() / negs.len() as f64
        }
    }
}

impl MagnetModel {
    /// Eval-mode prediction: encode, weight, adapt, fuse and rank.
    pub fn predict(&self, trial: &TrialRecord) -> Result<PredictionRecord> {
        Ok(self.predict_batch(&[trial])?.remove(0))
    }

    /// [`MagnetModel::predict`] over several trials sharing one graph.
    pub fn predict_batch(&self, trials: &[&TrialRecord]) -> Result<Vec<PredictionRecord>> {
        let batch = self.prepare_batch(trials)?;
        let mut g = Graph::<f64>::inference();
        let fwd = self.forward(&mut g, &batch, &mut ForwardCtx::eval())?;
        let log_w = g.value(fwd.log_w);
        let thetas: Vec<_> = fwd.theta.iter().map(|&t| g.value(t)).collect();
        let expert_ids: Vec<String> = self.registry.ids().into_iter().map(String::from).collect();
        let k = self.k();
        let mut out = Vec::with_capacity(trials.len());
        for (i, trial) in trials.iter().enumerate() {
            let mut log_density = Vec::new();
            let mut weights = Vec::new();
            let mut adapted = Vec::new();
            for (j, row) in batch.rows[i].clone().enumerate() {
                let t = &trial.targets[j].state;
                let lw = log_w.row_slice(row);
                let mut terms = Vec::with_capacity(k);
                let mut moments = Vec::with_capacity(k);
                for (e, theta) in thetas.iter().enumerate() {
                    let params = TernaryGaussianParams::from_flat(theta.row_slice(row))?;
                    terms.push(lw[e] + log_pdf(&gaussian_pred(t, &params)?, &trial.endpoint)?);
                    let m = ternary_moments(&params, t.speed, t.size)?;
                    moments.push(AdaptedMoments {
                        mean: m.iter().map(|x| x.mean).collect(),
                        var: m.iter().map(|x| x.var).collect(),
                    });
                }
                log_density.push(logsumexp(&terms));
                weights.push(lw.iter().map(|x| x.exp()).collect());
                adapted.push(moments);
            }
            let ids: Vec<u32> = trial.targets.iter().map(|t| t.state.id).collect();
            out.push(PredictionRecord {
                trial_id: trial.trial_id,
                ranking: rank_by_score(&ids, &log_density),
                target_ids: ids,
                log_density,
                expert_ids: expert_ids.clone(),
                weights,
                adapted,
                env_missing: batch.env_missing[i],
            });
        }
        Ok(out)
    }
}

/// Non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`.
mod nonfinite {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<Repr> = xs
            .iter()
            .map(|&x| match x {
                x if x.is_finite() => Repr::Num(x),
                x if x.is_nan() => Repr::Text("nan".into()),
                x if x > 0.0 => Repr::Text("inf".into()),
                _ => Repr::Text("-inf".into()),
            })
            .collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?
            .into_iter()
            .map(|r| match r {
                Repr::Num(x) => Ok(x),
                Repr::Text(t) => match t.as_str() {
                    "inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    "nan" => Ok(f64::NAN),
                    _ => Err(serde::de::Error::custom(format!("bad float {t:?}"))),
                },
            })
            .collect()
    }
}
