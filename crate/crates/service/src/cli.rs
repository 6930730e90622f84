//! `magnet` command line.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use magnet::datagen::{build_dataset, Dataset, DatasetConfig, DEFAULT_RATE_HZ};
use magnet::eval::{aggregate, evaluate_model, run_benchmark, Ablation, BenchmarkConfig, MetricReport};
use magnet::experts::{fit_calibration_registry, fit_expert, ExpertRegistry, CALIBRATION_SEED, DEFAULT_MIN_COUNT};
use magnet::model::{MagnetModel, ModelConfig};
use magnet::nn::Checkpoint;
use magnet::{MagnetError, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::server::{serve, AppState};

#[derive(Parser, Debug)]
#[command(name = "magnet", version, about = "Moving-target intent inference: data, experts, training, evaluation, serving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Base seed; 0 by default, the calibration seed for `fit-experts`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file merged over the defaults; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct Inputs {
    /// Dataset in the line-delimited record format.
    #[arg(long)]
    pub data: PathBuf,
    /// Expert registry JSON.
    #[arg(long)]
    pub experts: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BaselineMode {
    Include,
    Only,
    Skip,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Datagen {
        #[command(flatten)]
        common: Common,
        /// mts2d, mts3d or calib-<expert>.
        #[arg(long, default_value = "mts2d")]
        preset: String,
        #[arg(long, default_value_t = DEFAULT_RATE_HZ)]
        rate_hz: f64,
    },
    /// Fit experts from calibration presets, or one expert from a dataset.
    FitExperts {
        #[command(flatten)]
        common: Common,
        /// Calibration experts, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "s-f,s-h,w-h")]
        ids: Vec<String>,
        /// Fit a single expert named `--id` from this dataset instead.
        #[arg(long, requires = "id")]
        data: Option<PathBuf>,
        #[arg(long)]
        id: Option<String>,
        #[arg(long, default_value_t = DEFAULT_RATE_HZ)]
        rate_hz: f64,
        #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
        min_count: usize,
    },
    /// Few-shot training under several seeds; writes checkpoints and a report.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Default: 1,3,5,10 for 2D data, 1,2 for 3D.
        #[arg(long, value_delimiter = ',')]
        shots: Vec<usize>,
        /// Number of seeds, counted up from `--seed`.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Score a checkpoint and/or the baselines on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "include")]
        baselines: BaselineMode,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Expert ablations next to the full model.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Expert ids to drop one at a time, or `all`; default: `all` and every expert.
        #[arg(long, value_delimiter = ',')]
        drop: Vec<String>,
        /// Default: 10 for 2D data, 2 for 3D.
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Merge report files and print the aggregated table.
    Report {
        /// `report.json` files or directories containing one.
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP/WebSocket inference service.
    Serve {
        #[arg(long, env = "MAGNET_CHECKPOINT")]
        checkpoint: Option<PathBuf>,
        /// Registry for an untrained model, or checked against the checkpoint.
        #[arg(long, env = "MAGNET_EXPERTS")]
        experts: Option<PathBuf>,
        #[arg(long, env = "MAGNET_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "MAGNET_HOST", default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Deep-merges the JSON object in `path` over `default`. Keys absent from
/// the default are an error naming the key.
pub fn merge_config<T: Serialize + DeserializeOwned>(default: &T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(serde_json::from_value(serde_json::to_value(default)?)?);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| MagnetError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let overlay: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| MagnetError::Config(format!("config {}: {e}", path.display())))?;
    let mut base = serde_json::to_value(default)?;
    merge(&mut base, overlay, "")?;
    serde_json::from_value(base).map_err(|e| MagnetError::Config(format!("config {}: {e}", path.display())))
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value, at: &str) -> Result<()> {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                let key = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => {
                        let known: Vec<&String> = b.keys().collect();
                        return Err(MagnetError::Config(format!("unknown config field `{key}`; expected one of {known:?}")));
                    }
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}

fn load_inputs(inputs: &Inputs) -> Result<(Dataset, ExpertRegistry)> {
    let ds = Dataset::load(&inputs.data)?;
    let reg = ExpertRegistry::load(&inputs.experts)?;
    if reg.dim() != ds.dim() {
        return Err(MagnetError::Config(format!(
            "{} holds {}D experts but {} is {}D",
            inputs.experts.display(),
            reg.dim(),
            inputs.data.display(),
            ds.dim()
        )));
    }
    Ok((ds, reg))
}

fn bench_config(common: &Common, dim: usize, seeds: usize) -> Result<BenchmarkConfig> {
    let mut cfg = merge_config(&BenchmarkConfig::for_dim(dim), common.config.as_deref())?;
    if seeds == 0 {
        return Err(MagnetError::Config("--seeds must be >= 1".into()));
    }
    let base = common.seed.unwrap_or(0);
    cfg.seeds = (base..base + seeds as u64).collect();
    Ok(cfg)
}

fn write_report(report: &MetricReport, out: &Path) -> Result<()> {
    report.write_dir(out)?;
    println!("{}", report.to_markdown());
    eprintln!("report written to {}", out.display());
    Ok(())
}

/// Loads a checkpoint and, when given, checks the registry against it.
pub fn load_model(checkpoint: Option<&Path>, experts: Option<&Path>, seed: u64) -> Result<(MagnetModel, Option<String>)> {
    match (checkpoint, experts) {
        (Some(ck), reg) => {
            let ck = Checkpoint::load(ck)?;
            let model = MagnetModel::from_checkpoint(&ck)?;
            if let Some(path) = reg {
                let reg = ExpertRegistry::load(path)?;
                if reg.to_json()? != model.registry.to_json()? {
                    return Err(MagnetError::Config(format!(
                        "{} does not match the registry stored in the checkpoint",
                        path.display()
                    )));
                }
            }
            Ok((model, Some(ck.digest()?)))
        }
        (None, Some(path)) => {
            let reg = ExpertRegistry::load(path)?;
            tracing::warn!("no checkpoint: serving the untrained model, a uniform mixture of the experts");
            Ok((MagnetModel::new(ModelConfig::for_dim(reg.dim()), reg, seed)?, None))
        }
        (None, None) => Err(MagnetError::Config("serve needs --checkpoint or --experts (or MAGNET_CHECKPOINT / MAGNET_EXPERTS)".into())),
    }
}

fn merged_reports(inputs: &[PathBuf]) -> Result<MetricReport> {
    let mut merged: Option<MetricReport> = None;
    for p in inputs {
        let file = if p.is_dir() { p.join("report.json") } else { p.clone() };
        let r = MetricReport::load_json(&file)?;
        match merged.as_mut() {
            None => merged = Some(r),
            Some(m) => {
                if m.meta.dataset_hash != r.meta.dataset_hash {
                    return Err(MagnetError::Config(format!("{} was computed on a different dataset", file.display())));
                }
                m.rows.extend(r.rows);
                m.failures.extend(r.failures);
                m.meta.per_seed.extend(r.meta.per_seed);
            }
        }
    }
    let mut m = merged.ok_or_else(|| MagnetError::Config("no reports given".into()))?;
    m.aggregate = aggregate(&m.rows, &m.failures);
    Ok(m)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen { common, preset, rate_hz } => {
            let cfg = merge_config(&DatasetConfig::preset(&preset, rate_hz)?, common.config.as_deref())?;
            let ds = build_dataset(&cfg, common.seed.unwrap_or(0))?;
            ds.save(&common.out)?;
            eprintln!("{} trials written to {}", ds.trials.len(), common.out.display());
        }
        Command::FitExperts { common, ids, data, id, rate_hz, min_count } => {
            let reg = match (data, id) {
                (Some(path), Some(id)) => {
                    let ds = Dataset::load(&path)?;
                    ExpertRegistry::new(vec![fit_expert(&id, &ds.trials, min_count, &path.display().to_string())?])?
                }
                _ => {
                    let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
                    fit_calibration_registry(&ids, common.seed.unwrap_or(CALIBRATION_SEED), rate_hz, min_count)?
                }
            };
            reg.save(&common.out)?;
            eprintln!("{} experts written to {}", reg.len(), common.out.display());
        }
        Command::Train { common, inputs, shots, seeds } => {
            let (ds, reg) = load_inputs(&inputs)?;
            let mut cfg = bench_config(&common, ds.dim(), seeds)?;
            if !shots.is_empty() {
                cfg.shots = shots;
            }
            cfg.baselines = false;
            cfg.magnet = true;
            cfg.ablations.clear();
            let report = run_benchmark(&ds, &reg, &cfg, Some(&common.out.join("checkpoints")))?;
            write_report(&report, &common.out)?;
        }
        Command::Eval { common, inputs, checkpoint, baselines, seeds } => {
            let (ds, reg) = load_inputs(&inputs)?;
            let mut cfg = bench_config(&common, ds.dim(), seeds)?;
            cfg.baselines = baselines != BaselineMode::Skip;
            let report = match (checkpoint, baselines) {
                (_, BaselineMode::Only) => {
                    cfg.magnet = false;
                    cfg.ablations.clear();
                    run_benchmark(&ds, &reg, &cfg, None)?
                }
                (Some(ck), _) => {
                    let (model, _) = load_model(Some(&ck), Some(&inputs.experts), 0)?;
                    let label = format!("MAGNeT ({})", ck.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default());
                    evaluate_model(&ds, &model, &label, &cfg)?
                }
                (None, _) => {
                    return Err(MagnetError::Config(
                        "eval needs --checkpoint <file> or --baselines only; use `train` to fit models".into(),
                    ))
                }
            };
            write_report(&report, &common.out)?;
        }
        Command::Ablate { common, inputs, drop, shots, seeds } => {
            let (ds, reg) = load_inputs(&inputs)?;
            let mut cfg = bench_config(&common, ds.dim(), seeds)?;
            let drop = if drop.is_empty() {
                std::iter::once("all".to_string()).chain(reg.ids().into_iter().map(String::from)).collect()
            } else {
                drop
            };
            cfg.ablations = drop
                .into_iter()
                .map(|d| {
                    if d == "all" {
                        Ok(Ablation::All)
                    } else if reg.get(&d).is_some() {
                        Ok(Ablation::Drop(d))
                    } else {
                        Err(MagnetError::Config(format!("--drop {d}: not in the registry {:?}", reg.ids())))
                    }
                })
                .collect::<Result<_>>()?;
            cfg.baselines = false;
            cfg.magnet = true;
            let shots = shots.unwrap_or(cfg.ablation_shots);
            cfg.shots = vec![shots];
            cfg.ablation_shots = shots;
            let report = run_benchmark(&ds, &reg, &cfg, None)?;
            write_report(&report, &common.out)?;
        }
        Command::Report { inputs, out } => {
            let report = merged_reports(&inputs)?;
            match out {
                Some(dir) => write_report(&report, &dir)?,
                None => println!("{}", report.to_markdown()),
            }
        }
        Command::Serve { checkpoint, experts, port, host, seed } => {
            let (model, hash) = load_model(checkpoint.as_deref(), experts.as_deref(), seed)?;
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| MagnetError::Config(format!("bad listen address {host}:{port}: {e}")))?;
            let state = Arc::new(AppState::new(model, hash)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(state, addr))?;
        }
    }
    Ok(())
}
