use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::motion::{simulate_motion_window, VibrationProfile};
use super::record::{TargetRecord, TrialRecord, UserRecord};
use super::scene::Scene;
use super::truth::ground_truth;
use crate::encoders::{Gender, Gesture, UserProfile};
use crate::error::{MagnetError, Result};
use crate::eval::rmsa;
use crate::gaussian::{local_frame, ternary_moments, TernaryGaussianParams};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const MAX_TRIALS: usize = 1_000_000;

/// One acquisition scenario: scene layout, condition grid, endpoint model
/// and vehicle motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub id: String,
    pub gesture: Gesture,
    pub target_count: usize,
    pub sizes: Vec<f64>,
    pub speeds: Vec<f64>,
    /// `[min, max]` per world axis.
    pub bounds: Vec<[f64; 2]>,
    /// Whole targets stay within `bounds`; otherwise only their centers.
    pub contain_targets: bool,
    pub ground_truth: String,
    pub truth: TernaryGaussianParams,
    /// Endpoint spread is multiplied by `1 + kappa * RMSA`.
    pub kappa: f64,
    pub smooth: VibrationProfile,
    pub rough: VibrationProfile,
    pub rough_fraction: f64,
    /// Range of time the scene moves before the touch, seconds.
    pub dwell_s: [f64; 2],
}

pub const SIZES_2D: [f64; 4] = [65.0, 95.0, 125.0, 155.0];
pub const SPEEDS_2D: [f64; 4] = [300.0, 550.0, 800.0, 1050.0];
pub const SIZES_3D: [f64; 4] = [0.04, 0.08, 0.12, 0.16];
pub const SPEEDS_3D: [f64; 4] = [0.22, 0.34, 0.45, 0.56];
pub const DEFAULT_RATE_HZ: f64 = 10.0;

impl ScenarioConfig {
    pub fn screen_2d(id: &str, gesture: Gesture, truth_id: &str, rate_hz: f64) -> Result<Self> {
        Ok(Self {
            id: id.to_string(),
            gesture,
            target_count: 15,
            sizes: SIZES_2D.to_vec(),
            speeds: SPEEDS_2D.to_vec(),
            bounds: vec![[0.0, 2560.0], [0.0, 1600.0]],
            contain_targets: true,
            ground_truth: truth_id.to_string(),
            truth: truth(truth_id)?,
            kappa: 0.6,
            smooth: VibrationProfile::smooth(rate_hz),
            rough: VibrationProfile::rough(rate_hz),
            rough_fraction: 0.5,
            dwell_s: [0.5, 2.0],
        })
    }

    pub fn scene_3d(id: &str, rate_hz: f64) -> Result<Self> {
        Ok(Self {
            id: id.to_string(),
            gesture: Gesture::Controller,
            target_count: 5,
            sizes: SIZES_3D.to_vec(),
            speeds: SPEEDS_3D.to_vec(),
            bounds: vec![[-0.5, 0.5], [-0.3, 0.3], [0.25, 0.6]],
            contain_targets: false,
            ground_truth: "3d".into(),
            truth: truth("3d")?,
            kappa: 0.6,
            smooth: VibrationProfile::smooth(rate_hz),
            rough: VibrationProfile::rough(rate_hz),
            rough_fraction: 0.5,
            dwell_s: [0.5, 2.0],
        })
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MagnetError::Config(format!("scenario {}: {m}", self.id)));
        if !(2..=3).contains(&self.dim()) || self.truth.dim() != self.dim() {
            return bad(format!("bounds are {}D, truth is {}D", self.dim(), self.truth.dim()));
        }
        if self.target_count == 0 || self.sizes.is_empty() || self.speeds.is_empty() {
            return bad("needs targets, sizes and speeds".into());
        }
        if self.sizes.iter().any(|&w| !(w > 0.0)) || self.speeds.iter().any(|&v| !(v >= 0.0)) {
            return bad("sizes must be > 0 and speeds >= 0".into());
        }
        if !(self.kappa >= 0.0) || !(0.0..=1.0).contains(&self.rough_fraction) {
            return bad(format!("kappa {} / rough fraction {} out of range", self.kappa, self.rough_fraction));
        }
        if !(self.dwell_s[0] >= 0.0 && self.dwell_s[1] >= self.dwell_s[0]) {
            return bad(format!("dwell range {:?}", self.dwell_s));
        }
        self.truth.validate()?;
        self.smooth.validate()?;
        self.rough.validate()?;
        if self.smooth.rate_hz != self.rough.rate_hz {
            return bad("vibration profiles disagree on sample rate".into());
        }
        Ok(())
    }
}

fn truth(id: &str) -> Result<TernaryGaussianParams> {
    ground_truth(id).ok_or_else(|| MagnetError::Config(format!("unknown ground-truth expert {id:?}")))
}

/// Full-factorial dataset layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    pub scenarios: Vec<ScenarioConfig>,
    pub users: usize,
    pub females: usize,
    pub age_mean: f64,
    pub age_sd: f64,
    pub reps: usize,
}

impl DatasetConfig {
    /// 4 sizes x 4 speeds x 2 gestures x 10 users x 12 repetitions.
    pub fn mts2d(rate_hz: f64) -> Result<Self> {
        Ok(Self {
            name: "mts2d".into(),
            scenarios: vec![
                ScenarioConfig::screen_2d("mts2d-fixed", Gesture::Fixed, "s-f", rate_hz)?,
                ScenarioConfig::screen_2d("mts2d-handheld", Gesture::Handheld, "s-h", rate_hz)?,
            ],
            users: 10,
            females: 3,
            age_mean: 23.4,
            age_sd: 2.84,
            reps: 12,
        })
    }

    /// 4 sizes x 4 speeds x 10 users x 6 repetitions.
    pub fn mts3d(rate_hz: f64) -> Result<Self> {
        Ok(Self {
            name: "mts3d".into(),
            scenarios: vec![ScenarioConfig::scene_3d("mts3d-controller", rate_hz)?],
            users: 10,
            females: 3,
            age_mean: 23.4,
            age_sd: 2.84,
            reps: 6,
        })
    }

    /// Single-scenario data for fitting one expert: 100 samples per cell.
    pub fn calibration(expert: &str, rate_hz: f64) -> Result<Self> {
        let scenario = match expert {
            "s-f" => ScenarioConfig::screen_2d("calib-s-f", Gesture::Fixed, "s-f", rate_hz)?,
            "s-h" => ScenarioConfig::screen_2d("calib-s-h", Gesture::Handheld, "s-h", rate_hz)?,
            "w-h" => ScenarioConfig::screen_2d("calib-w-h", Gesture::Handheld, "w-h", rate_hz)?,
            "3d" => ScenarioConfig::scene_3d("calib-3d", rate_hz)?,
            _ => return Err(MagnetError::Config(format!("no calibration preset for expert {expert:?}"))),
        };
        Ok(Self {
            name: format!("calib-{expert}"),
            scenarios: vec![scenario],
            users: 10,
            females: 3,
            age_mean: 23.4,
            age_sd: 2.84,
            reps: 10,
        })
    }

    pub fn preset(name: &str, rate_hz: f64) -> Result<Self> {
        match name {
            "mts2d" => Self::mts2d(rate_hz),
            "mts3d" => Self::mts3d(rate_hz),
            _ => match name.strip_prefix("calib-") {
                Some(e) => Self::calibration(e, rate_hz),
                None => Err(MagnetError::Config(format!(
                    "unknown preset {name:?}; expected mts2d, mts3d or calib-<expert>"
                ))),
            },
        }
    }

    pub fn trial_count(&self) -> usize {
        self.scenarios
            .iter()
            .map(|s| s.sizes.len() * s.speeds.len())
            .sum::<usize>()
            * self.users
            * self.reps
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() || self.users == 0 || self.reps == 0 {
            return Err(MagnetError::Config("dataset needs scenarios, users and repetitions".into()));
        }
        if self.females > self.users {
            return Err(MagnetError::Config(format!("{} females among {} users", self.females, self.users)));
        }
        let dim = self.scenarios[0].dim();
        for s in &self.scenarios {
            s.validate()?;
            if s.dim() != dim {
                return Err(MagnetError::Config("scenarios mix 2D and 3D".into()));
            }
        }
        let n = self.trial_count();
        if n > MAX_TRIALS {
            return Err(MagnetError::Config(format!("{n} trials exceed the cap of {MAX_TRIALS}")));
        }
        Ok(())
    }
}

/// Header line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub trials: usize,
    pub config: DatasetConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub trials: Vec<TrialRecord>,
}

/// Participants with ages drawn from `N(age_mean, age_sd)` rounded to whole
/// years and `females` of them female.
pub fn generate_users(cfg: &DatasetConfig, seed: u64) -> Result<Vec<(u32, f64, Gender)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d05e_5u64);
    let age = Normal::new(cfg.age_mean, cfg.age_sd).map_err(|e| MagnetError::Config(format!("age distribution: {e}")))?;
    let mut genders: Vec<Gender> = (0..cfg.users)
        .map(|i| if i < cfg.females { Gender::Female } else { Gender::Male })
        .collect();
    genders.shuffle(&mut rng);
    Ok((0..cfg.users)
        .map(|i| {
            let a: f64 = age.sample(&mut rng);
            (i as u32, a.round().max(1.0), genders[i])
        })
        .collect())
}

/// Independent per-trial seed derived from the dataset seed.
pub fn trial_seed(seed: u64, trial_id: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial_id);
    rng.next_u64()
}

/// One trial: random scene advanced by bounce kinematics, a motion window,
/// and an endpoint drawn from the scenario's endpoint model with spread
/// scaled by `1 + kappa * RMSA`.
pub fn gen_trial(
    sc: &ScenarioConfig,
    cond: (f64, f64),
    user: UserRecord,
    trial_id: u64,
    seed: u64,
) -> Result<TrialRecord> {
    let (w, v) = cond;
    if !sc.sizes.contains(&w) || !sc.speeds.contains(&v) {
        return Err(MagnetError::Config(format!(
            "condition (W={w}, V={v}) is not in the grid of scenario {}",
            sc.id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = Scene::random(&mut rng, &sc.bounds, sc.target_count, w, v, sc.contain_targets)?;
    let dwell = if sc.dwell_s[1] > sc.dwell_s[0] {
        rng.random_range(sc.dwell_s[0]..sc.dwell_s[1])
    } else {
        sc.dwell_s[0]
    };
    scene.advance(dwell, 1.0 / 120.0);
    let intended = rng.random_range(0..scene.targets.len());
    let rough = rng.random::<f64>() < sc.rough_fraction;
    let profile = if rough { &sc.rough } else { &sc.smooth };
    let env = simulate_motion_window(profile, rng.next_u64())?;
    let intensity = rmsa(&env.acc)?;
    let target = &scene.targets[intended];
    let moments = ternary_moments(&sc.truth, v, w)?;
    let factor = 1.0 + sc.kappa * intensity;
    let local: Vec<f64> = moments
        .iter()
        .map(|m| {
            let z: f64 = StandardNormal.sample(&mut rng);
            m.mean + factor * m.var.sqrt() * z
        })
        .collect();
    let endpoint = local_frame(target)?.to_world(&local);
    Ok(TrialRecord {
        trial_id,
        user,
        scenario_id: sc.id.clone(),
        targets: scene
            .targets
            .into_iter()
            .enumerate()
            .map(|(i, state)| TargetRecord { state, intended: i == intended })
            .collect(),
        endpoint,
        env: Some(env),
        rmsa: Some(intensity),
    })
}

/// Full-factorial dataset in the order user, scenario, size, speed,
/// repetition. Trials are generated in parallel from per-trial seeds, so
/// the result does not depend on scheduling.
pub fn build_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let users = generate_users(cfg, seed)?;
    let mut jobs = Vec::with_capacity(cfg.trial_count());
    for &(id, age, gender) in &users {
        for sc in &cfg.scenarios {
            for &w in &sc.sizes {
                for &v in &sc.speeds {
                    for _ in 0..cfg.reps {
                        let user = UserRecord { id, profile: UserProfile { gesture: sc.gesture, age, gender } };
                        jobs.push((sc, (w, v), user, jobs.len() as u64));
                    }
                }
            }
        }
    }
    let trials = jobs
        .into_par_iter()
        .map(|(sc, cond, user, id)| gen_trial(sc, cond, user, id, trial_seed(seed, id)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        header: DatasetHeader {
            schema_version: DATASET_SCHEMA_VERSION,
            name: cfg.name.clone(),
            seed,
            trials: trials.len(),
            config: cfg.clone(),
        },
        trials,
    })
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.header.config.scenarios.first().map(|s| s.dim()).unwrap_or(2)
    }

    /// Header line then one record per line, each newline-terminated.
    pub fn write_jsonl(&self, out: impl Write) -> Result<()> {
        let mut w = BufWriter::new(out);
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for t in &self.trials {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(buf)
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let perr = |msg: String| MagnetError::Parse { expected: DATASET_SCHEMA_VERSION, msg };
        let mut lines = input.lines();
        let first = lines.next().ok_or_else(|| perr("empty dataset file".into()))??;
        let raw: serde_json::Value = serde_json::from_str(&first).map_err(|e| perr(format!("header: {e}")))?;
        let version = raw.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(DATASET_SCHEMA_VERSION as u64) {
            return Err(perr(format!("dataset schema_version {:?} is not supported", raw.get("schema_version"))));
        }
        let header: DatasetHeader = serde_json::from_value(raw).map_err(|e| perr(format!("header: {e}")))?;
        let mut trials = Vec::with_capacity(header.trials);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: TrialRecord =
                serde_json::from_str(&line).map_err(|e| perr(format!("record on line {}: {e}", i + 2)))?;
            t.validate()?;
            trials.push(t);
        }
        if trials.len() != header.trials {
            return Err(perr(format!("header announces {} trials, file has {}", header.trials, trials.len())));
        }
        Ok(Self { header, trials })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_jsonl(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// SHA-256 of the serialized file.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_jsonl_bytes()?)))
    }
}
