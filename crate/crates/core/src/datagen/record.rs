use serde::{Deserialize, Serialize};

use crate::encoders::{EnvWindow, UserProfile};
use crate::error::{MagnetError, Result};
use crate::gaussian::TargetState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub id: u32,
    #[serde(flatten)]
    pub profile: UserProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    #[serde(flatten)]
    pub state: TargetState,
    #[serde(default)]
    pub intended: bool,
}

/// One selection event: the scene at touch time, the endpoint and the 3 s
/// of motion before it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub user: UserRecord,
    pub scenario_id: String,
    pub targets: Vec<TargetRecord>,
    pub endpoint: Vec<f64>,
    #[serde(default)]
    pub env: Option<EnvWindow>,
    #[serde(default)]
    pub rmsa: Option<f64>,
}

impl TrialRecord {
    pub fn dim(&self) -> usize {
        self.endpoint.len()
    }

    pub fn target_states(&self) -> Vec<TargetState> {
        self.targets.iter().map(|t| t.state.clone()).collect()
    }

    pub fn intended_id(&self) -> Option<u32> {
        let mut it = self.targets.iter().filter(|t| t.intended);
        match (it.next(), it.next()) {
            (Some(t), None) => Some(t.state.id),
            _ => None,
        }
    }

    pub fn intended_index(&self) -> Option<usize> {
        let id = self.intended_id()?;
        self.targets.iter().position(|t| t.state.id == id)
    }

    /// Shape checks shared by prediction payloads and dataset records.
    pub fn validate_scene(&self) -> Result<()> {
        let err = |m: String| MagnetError::Validation(format!("trial {}: {m}", self.trial_id));
        if self.targets.is_empty() {
            return Err(err("no targets".into()));
        }
        let d = self.dim();
        if !(2..=3).contains(&d) || !self.endpoint.iter().all(|x| x.is_finite()) {
            return Err(err(format!("endpoint {:?} is not a finite 2D/3D point", self.endpoint)));
        }
        let mut ids: Vec<u32> = self.targets.iter().map(|t| t.state.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(err("duplicate target ids".into()));
        }
        for t in &self.targets {
            if t.state.dim() != d {
                return Err(err(format!("target {} is {}D, endpoint {d}D", t.state.id, t.state.dim())));
            }
            t.state.validate().map_err(|e| err(e.to_string()))?;
        }
        if let Some(env) = &self.env {
            env.validate().map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    /// Full dataset-record validation: scene plus exactly one intended target.
    pub fn validate(&self) -> Result<()> {
        self.validate_scene()?;
        let n = self.targets.iter().filter(|t| t.intended).count();
        if n != 1 {
            return Err(MagnetError::Validation(format!(
                "trial {}: {n} intended targets, expected exactly 1",
                self.trial_id
            )));
        }
        Ok(())
    }
}
