//! Pre-fitted Ternary-Gaussian experts: fitting from endpoint samples and
//! the on-disk registry.

mod fit;

pub use fit::{
    fit_condition_moments, fit_ternary_params, CellMoments, ConditionMoments, EndpointSample,
    FitResiduals, TernaryFit, DEFAULT_MIN_COUNT,
};

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::TrialRecord;
use crate::error::{MagnetError, Result};
use crate::gaussian::TernaryGaussianParams;

pub const REGISTRY_SCHEMA_VERSION: u32 = 1;

/// How an expert's coefficients were obtained.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Free-text origin, e.g. the generator preset and seed.
    pub source: String,
    /// `(size, speed)` of every fitted cell.
    pub condition_grid: Vec<(f64, f64)>,
    pub samples_per_condition: Vec<usize>,
    pub residuals: FitResiduals,
    #[serde(default)]
    pub low_confidence_cells: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub id: String,
    pub dim: usize,
    #[serde(flatten)]
    pub params: TernaryGaussianParams,
    pub provenance: Provenance,
}

impl ExpertSpec {
    pub fn from_fit(id: &str, moments: &ConditionMoments, fit: TernaryFit, source: &str) -> Self {
        Self {
            id: id.to_string(),
            dim: fit.params.dim(),
            params: fit.params,
            provenance: Provenance {
                source: source.to_string(),
                condition_grid: moments.cells.iter().map(|c| (c.size, c.speed)).collect(),
                samples_per_condition: moments.cells.iter().map(|c| c.count).collect(),
                residuals: fit.residuals,
                low_confidence_cells: moments.cells.iter().filter(|c| c.low_confidence).count(),
            },
        }
    }
}

/// Local-frame endpoint offsets of the intended targets.
pub fn endpoint_samples(trials: &[TrialRecord]) -> Result<Vec<EndpointSample>> {
    trials
        .iter()
        .map(|t| {
            let i = t.intended_index().ok_or_else(|| {
                MagnetError::Input(format!("trial {} needs exactly one intended target", t.trial_id))
            })?;
            EndpointSample::from_endpoint(&t.targets[i].state, &t.endpoint)
        })
        .collect()
}

/// Condition moments and Ternary-Gaussian fit of one expert.
pub fn fit_expert(id: &str, trials: &[TrialRecord], min_count: usize, source: &str) -> Result<ExpertSpec> {
    let moments = fit_condition_moments(&endpoint_samples(trials)?, min_count)?;
    let fit = fit_ternary_params(&moments)?;
    Ok(ExpertSpec::from_fit(id, &moments, fit, source))
}

/// Registry fitted from the generator's calibration presets, one expert
/// per id, in the given order.
pub fn fit_calibration_registry(ids: &[&str], seed: u64, rate_hz: f64, min_count: usize) -> Result<ExpertRegistry> {
    let mut experts = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        let cfg = crate::datagen::DatasetConfig::calibration(id, rate_hz)?;
        let ds = crate::datagen::build_dataset(&cfg, seed.wrapping_add(i as u64))?;
        let source = format!("{} seed {}", cfg.name, seed.wrapping_add(i as u64));
        experts.push(fit_expert(id, &ds.trials, min_count, &source)?);
    }
    ExpertRegistry::new(experts)
}

/// Calibration seed behind the shipped registries.
pub const CALIBRATION_SEED: u64 = 100;

pub const NEUTRAL_EXPERT_ID: &str = "neutral";

/// Zero-mean isotropic expert with a constant spread, independent of size
/// and speed.
pub fn neutral_expert(dim: usize, spread: f64) -> Result<ExpertSpec> {
    let params = TernaryGaussianParams {
        mu: vec![[0.0; 3]; dim],
        sigma: vec![[spread, 0.0, 0.0]; dim],
    };
    params.validate()?;
    if !(spread > 0.0) {
        return Err(MagnetError::Config(format!("neutral spread must be > 0, got {spread}")));
    }
    Ok(ExpertSpec {
        id: NEUTRAL_EXPERT_ID.into(),
        dim,
        params,
        provenance: Provenance { source: format!("neutral isotropic, spread {spread}"), ..Default::default() },
    })
}

#[derive(Serialize, Deserialize)]
struct RegistryFile {
    schema_version: u32,
    units: Units,
    experts: Vec<ExpertSpec>,
}

#[derive(Serialize, Deserialize)]
struct Units {
    #[serde(rename = "2d")]
    two_d: String,
    #[serde(rename = "3d")]
    three_d: String,
}

impl Default for Units {
    fn default() -> Self {
        Self {
            two_d: "mean offsets in px, speed in px/s, size as diameter in px".into(),
            three_d: "mean offsets in m, speed in m/s, size as radius in m".into(),
        }
    }
}

/// Ordered, immutable set of experts sharing one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertRegistry {
    experts: Vec<ExpertSpec>,
}

impl ExpertRegistry {
    pub fn new(experts: Vec<ExpertSpec>) -> Result<Self> {
        let reg = Self { experts };
        reg.validate()?;
        Ok(reg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(MagnetError::Validation("registry has no experts".into()));
        }
        let mut seen = HashSet::new();
        let dim = self.experts[0].dim;
        for e in &self.experts {
            if !seen.insert(e.id.as_str()) {
                return Err(MagnetError::Validation(format!("duplicate expert id {:?}", e.id)));
            }
            e.params
                .validate()
                .map_err(|err| MagnetError::Validation(format!("expert {:?}: {err}", e.id)))?;
            if e.dim != e.params.dim() || e.dim != dim {
                return Err(MagnetError::Validation(format!(
                    "expert {:?} has dimension {} but the registry is {dim}D",
                    e.id, e.dim
                )));
            }
        }
        Ok(())
    }

    pub fn experts(&self) -> &[ExpertSpec] {
        &self.experts
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.experts[0].dim
    }

    pub fn ids(&self) -> Vec<&str> {
        self.experts.iter().map(|e| e.id.as_str()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&ExpertSpec> {
        self.experts.iter().find(|e| e.id == id)
    }

    /// Registry with the listed ids removed, order preserved.
    pub fn without(&self, ids: &[&str]) -> Result<Self> {
        for id in ids {
            if self.get(id).is_none() {
                return Err(MagnetError::Config(format!("unknown expert id {id:?}")));
            }
        }
        Self::new(
            self.experts
                .iter()
                .filter(|e| !ids.contains(&e.id.as_str()))
                .cloned()
                .collect(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        let file = RegistryFile {
            schema_version: REGISTRY_SCHEMA_VERSION,
            units: Units::default(),
            experts: self.experts.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let perr = |msg: String| MagnetError::Parse {
            expected: REGISTRY_SCHEMA_VERSION,
            msg,
        };
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| perr(format!("expert registry: {e}")))?;
        let version = raw.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(REGISTRY_SCHEMA_VERSION as u64) {
            return Err(perr(format!(
                "expert registry schema_version {:?} is not supported",
                raw.get("schema_version")
            )));
        }
        let file: RegistryFile =
            serde_json::from_value(raw).map_err(|e| perr(format!("expert registry: {e}")))?;
        Self::new(file.experts)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
