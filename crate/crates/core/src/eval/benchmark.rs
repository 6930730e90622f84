use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baselines::{baseline_predict, best_single_expert, Baseline};
use super::metrics::{error_at_k, grouped_errors, Outcome};
use super::report::{aggregate, Failure, MetricReport, ReportMeta, ReportRow};
use super::{cluster_threshold, GroupingRule};
use crate::datagen::{few_shot_subset, split_dataset, Dataset, Split, SplitConfig, TrialRecord};
use crate::error::{MagnetError, Result};
use crate::experts::{neutral_expert, ExpertRegistry};
use crate::model::{MagnetModel, ModelConfig, TrainConfig};

/// Expert ablation run next to the full model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Registry without one expert.
    Drop(String),
    /// Registry replaced by a single neutral expert.
    All,
}

impl Ablation {
    pub fn label(&self) -> String {
        match self {
            Ablation::Drop(id) => format!("MAGNeT w/o {id}"),
            Ablation::All => "MAGNeT w/o all".into(),
        }
    }

    pub fn registry(&self, full: &ExpertRegistry, model: &ModelConfig) -> Result<ExpertRegistry> {
        match self {
            Ablation::Drop(id) => full.without(&[id.as_str()]),
            Ablation::All => ExpertRegistry::new(vec![neutral_expert(full.dim(), model.geometry.w_ref)?]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub seeds: Vec<u64>,
    pub shots: Vec<usize>,
    pub split: SplitConfig,
    /// Seed of the split when it is shared by all seeds.
    pub split_seed: u64,
    /// Draw a fresh test/validation split for every seed.
    pub resplit_per_seed: bool,
    /// Few-shot cells are user x size x speed, plus gesture when set.
    pub include_gesture: bool,
    pub baselines: bool,
    pub magnet: bool,
    pub ablations: Vec<Ablation>,
    pub ablation_shots: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl BenchmarkConfig {
    pub fn for_dim(dim: usize) -> Self {
        Self {
            seeds: (0..5).collect(),
            // the 3D pool holds 3 trials per cell
            shots: if dim == 3 { vec![1, 2] } else { vec![1, 3, 5, 10] },
            split: SplitConfig::for_dim(dim),
            split_seed: 0,
            resplit_per_seed: true,
            include_gesture: false,
            baselines: true,
            magnet: true,
            ablations: Vec::new(),
            ablation_shots: if dim == 3 { 2 } else { 10 },
            model: ModelConfig::for_dim(dim),
            train: TrainConfig::for_dim(dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(MagnetError::Config("benchmark needs at least one seed".into()));
        }
        if self.shots.iter().any(|&s| s == 0) || (!self.ablations.is_empty() && self.ablation_shots == 0) {
            return Err(MagnetError::Config("shot counts must be >= 1".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(MagnetError::Config(format!("duplicate seeds in {:?}", self.seeds)));
        }
        self.model.validate()?;
        self.train.validate()
    }
}

/// What one seed used, for the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedInfo {
    pub seed: u64,
    pub split_seed: u64,
    pub test: usize,
    pub val: usize,
    pub pool: usize,
    /// Single expert with the lowest validation top-1 error.
    pub matched_expert: Option<String>,
    pub matched_val_e1: Option<f64>,
    /// `(model, shots, train trials, best epoch)` per trained model.
    pub trained: Vec<(String, usize, usize, usize)>,
}

fn shot_seed(seed: u64, shots: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(shots as u64)
}

fn row(
    model: &str,
    shots: Option<usize>,
    seed: u64,
    outcomes: &[Outcome],
    cluster: &GroupingRule,
    mean: &GroupingRule,
) -> Result<ReportRow> {
    let gc = grouped_errors(outcomes, cluster)?;
    let gm = grouped_errors(outcomes, mean)?;
    Ok(ReportRow {
        model: model.to_string(),
        shots,
        seed,
        e_clust_g1: gc.g1,
        e_clust_g2: gc.g2,
        e_mean_g1: gm.g1,
        e_mean_g2: gm.g2,
        e_at_1: error_at_k(outcomes, 1)?,
        e_at_2: error_at_k(outcomes, 2)?,
    })
}

struct SeedResult {
    info: SeedInfo,
    rows: Vec<ReportRow>,
    failures: Vec<Failure>,
}

/// Predictions of `model` on `trials`, batched to bound memory.
pub(crate) fn magnet_outcomes(model: &MagnetModel, trials: &[TrialRecord]) -> Result<Vec<Outcome>> {
    let mut out = Vec::with_capacity(trials.len());
    for chunk in trials.chunks(256) {
        let refs: Vec<&TrialRecord> = chunk.iter().collect();
        for (t, p) in chunk.iter().zip(model.predict_batch(&refs)?) {
            out.push(Outcome::from_prediction(t, &p)?);
        }
    }
    Ok(out)
}

fn pick(trials: &[TrialRecord], idx: &[usize]) -> Vec<TrialRecord> {
    idx.iter().map(|&i| trials[i].clone()).collect()
}

#[allow(clippy::too_many_arguments)]
fn train_and_score(
    label: &str,
    shots: usize,
    seed: u64,
    registry: ExpertRegistry,
    cfg: &BenchmarkConfig,
    train: &[TrialRecord],
    val: &[TrialRecord],
    test: &[TrialRecord],
    checkpoints: Option<&Path>,
) -> Result<(Vec<Outcome>, usize)> {
    let mut model = MagnetModel::new(cfg.model.clone(), registry, seed)?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let log = model.train(train, val, &tc)?;
    tracing::info!(label, shots, seed, best_epoch = log.best_epoch, val = log.best_val_loss, "trained");
    if let Some(dir) = checkpoints {
        std::fs::create_dir_all(dir)?;
        let name = format!("{}_{shots}shot_seed{seed}.ckpt", label.replace([' ', '/'], "_"));
        model.to_checkpoint(seed, log.best_epoch)?.save(dir.join(name))?;
    }
    Ok((magnet_outcomes(&model, test)?, log.best_epoch))
}

struct SeedSets {
    test: Vec<TrialRecord>,
    val: Vec<TrialRecord>,
    pool: Vec<usize>,
    mean_rule: GroupingRule,
    result: SeedResult,
}

fn seed_sets(ds: &Dataset, cfg: &BenchmarkConfig, seed: u64) -> Result<SeedSets> {
    let split_seed = if cfg.resplit_per_seed { seed } else { cfg.split_seed };
    let Split { test, val, pool } = split_dataset(&ds.trials, cfg.split, split_seed)?;
    let test_set = pick(&ds.trials, &test);
    let val_set = pick(&ds.trials, &val);
    let mean_rule = GroupingRule::mean_rule(
        &test_set
            .iter()
            .map(|t| t.rmsa.ok_or_else(|| MagnetError::Input(format!("trial {} has no RMSA", t.trial_id))))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let result = SeedResult {
        info: SeedInfo {
            seed,
            split_seed,
            test: test.len(),
            val: val.len(),
            pool: pool.len(),
            matched_expert: None,
            matched_val_e1: None,
            trained: Vec::new(),
        },
        rows: Vec::new(),
        failures: Vec::new(),
    };
    Ok(SeedSets { test: test_set, val: val_set, pool, mean_rule, result })
}

fn record(
    res: &mut SeedResult,
    label: &str,
    shots: Option<usize>,
    cluster: &GroupingRule,
    mean_rule: &GroupingRule,
    r: Result<Vec<Outcome>>,
) {
    let seed = res.info.seed;
    match r.and_then(|o| row(label, shots, seed, &o, cluster, mean_rule)) {
        Ok(row) => res.rows.push(row),
        Err(e) => {
            tracing::warn!(label, ?shots, seed, "evaluation failed: {e}");
            res.failures.push(Failure { model: label.into(), shots, seed, error: e.to_string() });
        }
    }
}

fn run_baselines(sets: &mut SeedSets, registry: &ExpertRegistry, cluster: &GroupingRule) {
    let SeedSets { test, val, mean_rule, result: res, .. } = sets;
    for (label, method) in [("Border", Baseline::Border), ("Distance", Baseline::Distance)] {
        let r = test
            .iter()
            .map(|t| Outcome::new(t, baseline_predict(&method, t, None)?))
            .collect::<Result<Vec<_>>>();
        record(res, label, None, cluster, mean_rule, r);
    }
    let r = best_single_expert(registry, val).and_then(|(id, e1)| {
        res.info.matched_expert = Some(id.clone());
        res.info.matched_val_e1 = Some(e1);
        let method = Baseline::Expert(id);
        test.iter()
            .map(|t| Outcome::new(t, baseline_predict(&method, t, Some(registry))?))
            .collect::<Result<Vec<_>>>()
    });
    record(res, "Expert", None, cluster, mean_rule, r);
}

fn run_seed(
    ds: &Dataset,
    registry: &ExpertRegistry,
    cfg: &BenchmarkConfig,
    cluster: &GroupingRule,
    seed: u64,
    checkpoints: Option<&Path>,
) -> Result<SeedResult> {
    let mut sets = seed_sets(ds, cfg, seed)?;
    if cfg.baselines {
        run_baselines(&mut sets, registry, cluster);
    }
    let mut runs: Vec<(String, usize, Result<ExpertRegistry>)> = Vec::new();
    if cfg.magnet {
        for &s in &cfg.shots {
            runs.push(("MAGNeT".into(), s, Ok(registry.clone())));
        }
    }
    for a in &cfg.ablations {
        runs.push((a.label(), cfg.ablation_shots, a.registry(registry, &cfg.model)));
    }
    for (label, shots, reg) in runs {
        let r = reg.and_then(|reg| {
            let idx = few_shot_subset(&ds.trials, &sets.pool, shots, cfg.include_gesture, shot_seed(seed, shots))?;
            let train = pick(&ds.trials, &idx);
            let (o, best) = train_and_score(&label, shots, seed, reg, cfg, &train, &sets.val, &sets.test, checkpoints)?;
            sets.result.info.trained.push((label.clone(), shots, train.len(), best));
            Ok(o)
        });
        record(&mut sets.result, &label, Some(shots), cluster, &sets.mean_rule, r);
    }
    Ok(sets.result)
}

/// Every configured method under every seed. Seeds run concurrently; the
/// report is assembled in seed order so it does not depend on scheduling.
/// A method that fails under one seed is listed in `failures` and the run
/// continues.
pub fn run_benchmark(
    ds: &Dataset,
    registry: &ExpertRegistry,
    cfg: &BenchmarkConfig,
    checkpoints: Option<&Path>,
) -> Result<MetricReport> {
    cfg.validate()?;
    if registry.dim() != ds.dim() {
        return Err(MagnetError::Config(format!(
            "{}D registry for a {}D dataset",
            registry.dim(),
            ds.dim()
        )));
    }
    let cluster = dataset_cluster_rule(ds)?;
    let results = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(ds, registry, cfg, &cluster, seed, checkpoints))
        .collect::<Result<Vec<_>>>()?;
    assemble(ds, cfg, cluster, results)
}

fn dataset_cluster_rule(ds: &Dataset) -> Result<GroupingRule> {
    let all_rmsa = ds
        .trials
        .iter()
        .map(|t| t.rmsa.ok_or_else(|| MagnetError::Input(format!("trial {} has no RMSA", t.trial_id))))
        .collect::<Result<Vec<_>>>()?;
    cluster_threshold(&all_rmsa)
}

fn assemble(ds: &Dataset, cfg: &BenchmarkConfig, cluster: GroupingRule, results: Vec<SeedResult>) -> Result<MetricReport> {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut per_seed = Vec::new();
    for r in results {
        rows.extend(r.rows);
        failures.extend(r.failures);
        per_seed.push(r.info);
    }
    let aggregate = aggregate(&rows, &failures);
    Ok(MetricReport {
        meta: ReportMeta {
            dataset_name: ds.header.name.clone(),
            dataset_hash: ds.hash()?,
            trials: ds.trials.len(),
            shots: cfg.shots.clone(),
            seeds: cfg.seeds.clone(),
            cluster_rule: cluster,
            config: serde_json::to_value(cfg)?,
            per_seed,
        },
        rows,
        failures,
        aggregate,
    })
}

/// Scores an already trained model, under `label`, on the test split of
/// every seed in `cfg`, next to the baselines when they are enabled.
/// Training settings in `cfg` are ignored.
pub fn evaluate_model(
    ds: &Dataset,
    model: &MagnetModel,
    label: &str,
    cfg: &BenchmarkConfig,
) -> Result<MetricReport> {
    cfg.validate()?;
    if model.registry.dim() != ds.dim() {
        return Err(MagnetError::Config(format!(
            "{}D model for a {}D dataset",
            model.registry.dim(),
            ds.dim()
        )));
    }
    let cluster = dataset_cluster_rule(ds)?;
    let mut results = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut sets = seed_sets(ds, cfg, seed)?;
        if cfg.baselines {
            run_baselines(&mut sets, &model.registry, &cluster);
        }
        let r = magnet_outcomes(model, &sets.test);
        record(&mut sets.result, label, None, &cluster, &sets.mean_rule, r);
        results.push(sets.result);
    }
    assemble(ds, cfg, cluster, results)
}
