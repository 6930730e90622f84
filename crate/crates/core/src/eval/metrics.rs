use serde::{Deserialize, Serialize};

use super::GroupingRule;
use crate::datagen::TrialRecord;
use crate::error::{MagnetError, Result};
use crate::model::PredictionRecord;

/// What a method produced for one trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodOutput {
    /// Target ids, best first.
    Ranking(Vec<u32>),
    /// Whether the intended target was hit; methods without a ranking.
    Hit(bool),
}

/// One scored trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub trial_id: u64,
    pub intended: u32,
    pub rmsa: Option<f64>,
    pub output: MethodOutput,
}

impl Outcome {
    pub fn new(trial: &TrialRecord, output: MethodOutput) -> Result<Self> {
        let intended = trial.intended_id().ok_or_else(|| {
            MagnetError::Input(format!("trial {} needs exactly one intended target", trial.trial_id))
        })?;
        Ok(Self { trial_id: trial.trial_id, intended, rmsa: trial.rmsa, output })
    }

    pub fn from_prediction(trial: &TrialRecord, pred: &PredictionRecord) -> Result<Self> {
        if pred.trial_id != trial.trial_id {
            return Err(MagnetError::Input(format!(
                "prediction for trial {} paired with trial {}",
                pred.trial_id, trial.trial_id
            )));
        }
        Self::new(trial, MethodOutput::Ranking(pred.ranking.clone()))
    }

    /// `None` when the output carries no top-k information.
    fn miss_at(&self, k: usize) -> Result<Option<bool>> {
        match &self.output {
            MethodOutput::Hit(hit) => Ok((k == 1).then_some(!hit)),
            MethodOutput::Ranking(r) => {
                if k > r.len() {
                    return Err(MagnetError::Usage(format!(
                        "top-{k} error on trial {} with {} targets",
                        self.trial_id,
                        r.len()
                    )));
                }
                Ok(Some(!r[..k].contains(&self.intended)))
            }
        }
    }
}

/// Fraction of trials whose intended target is outside the top `k`.
/// `None` for hit-only outputs with `k > 1`, and for an empty set.
pub fn error_at_k(outcomes: &[Outcome], k: usize) -> Result<Option<f64>> {
    if k == 0 {
        return Err(MagnetError::Usage("top-k error needs k >= 1".into()));
    }
    let mut misses = 0usize;
    for o in outcomes {
        match o.miss_at(k)? {
            Some(m) => misses += m as usize,
            None => return Ok(None),
        }
    }
    if outcomes.is_empty() {
        return Ok(None);
    }
    Ok(Some(misses as f64 / outcomes.len() as f64))
}

/// Top-1 error per regime. An empty regime is `None`, not 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupedErrors {
    pub g1: Option<f64>,
    pub g2: Option<f64>,
    pub n1: usize,
    pub n2: usize,
}

pub fn grouped_errors(outcomes: &[Outcome], rule: &GroupingRule) -> Result<GroupedErrors> {
    let mut low = Vec::new();
    let mut high = Vec::new();
    for o in outcomes {
        let r = o
            .rmsa
            .ok_or_else(|| MagnetError::Input(format!("trial {} has no RMSA", o.trial_id)))?;
        if rule.is_high(r) {
            high.push(o.clone());
        } else {
            low.push(o.clone());
        }
    }
    Ok(GroupedErrors {
        g1: error_at_k(&low, 1)?,
        g2: error_at_k(&high, 1)?,
        n1: low.len(),
        n2: high.len(),
    })
}
