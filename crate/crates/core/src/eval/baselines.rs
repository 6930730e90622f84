use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{error_at_k, MethodOutput, Outcome};
use crate::datagen::TrialRecord;
use crate::error::{MagnetError, Result};
use crate::experts::ExpertRegistry;
use crate::gaussian::{bayes_posterior, rank_by_score};

/// Non-learned reference methods.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Hit iff the endpoint lies within the intended target's radius.
    Border,
    /// Nearest center first.
    Distance,
    /// Bayesian posterior under one registry expert.
    Expert(String),
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Baseline::Border => f.write_str("border"),
            Baseline::Distance => f.write_str("distance"),
            Baseline::Expert(id) => write!(f, "expert:{id}"),
        }
    }
}

impl FromStr for Baseline {
    type Err = MagnetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "border" => Ok(Baseline::Border),
            "distance" => Ok(Baseline::Distance),
            _ => match s.strip_prefix("expert:") {
                Some(id) if !id.is_empty() => Ok(Baseline::Expert(id.to_string())),
                _ => Err(MagnetError::Usage(format!(
                    "unknown method {s:?}; expected border, distance or expert:<id>"
                ))),
            },
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn baseline_predict(
    method: &Baseline,
    trial: &TrialRecord,
    registry: Option<&ExpertRegistry>,
) -> Result<MethodOutput> {
    trial.validate()?;
    match method {
        Baseline::Border => {
            let i = trial.intended_index().expect("validated");
            let t = &trial.targets[i].state;
            Ok(MethodOutput::Hit(distance(&t.center, &trial.endpoint) <= t.radius()))
        }
        Baseline::Distance => {
            let ids: Vec<u32> = trial.targets.iter().map(|t| t.state.id).collect();
            let scores: Vec<f64> = trial
                .targets
                .iter()
                .map(|t| -distance(&t.state.center, &trial.endpoint))
                .collect();
            Ok(MethodOutput::Ranking(rank_by_score(&ids, &scores)))
        }
        Baseline::Expert(id) => {
            let reg = registry
                .ok_or_else(|| MagnetError::Usage("the expert baseline needs a registry".into()))?;
            let e = reg
                .get(id)
                .ok_or_else(|| MagnetError::Config(format!("unknown expert id {id:?}")))?;
            let post = bayes_posterior(&trial.target_states(), &e.params, &trial.endpoint)?;
            Ok(MethodOutput::Ranking(post.ranking()))
        }
    }
}

/// Registry expert with the lowest top-1 error on `trials`; ties go to the
/// earlier expert.
pub fn best_single_expert(registry: &ExpertRegistry, trials: &[TrialRecord]) -> Result<(String, f64)> {
    let mut best: Option<(String, f64)> = None;
    for id in registry.ids() {
        let method = Baseline::Expert(id.to_string());
        let outcomes = trials
            .iter()
            .map(|t| Outcome::new(t, baseline_predict(&method, t, Some(registry))?))
            .collect::<Result<Vec<_>>>()?;
        let e1 = error_at_k(&outcomes, 1)?
            .ok_or_else(|| MagnetError::Input("expert selection over zero trials".into()))?;
        if best.as_ref().map_or(true, |(_, b)| e1 < *b) {
            best = Some((id.to_string(), e1));
        }
    }
    Ok(best.expect("registry is non-empty"))
}
