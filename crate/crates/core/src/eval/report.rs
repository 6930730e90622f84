use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::benchmark::SeedInfo;
use super::GroupingRule;
use crate::error::{MagnetError, Result};

/// One method evaluated under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub shots: Option<usize>,
    pub seed: u64,
    #[serde(rename = "E_clust_G1")]
    pub e_clust_g1: Option<f64>,
    #[serde(rename = "E_clust_G2")]
    pub e_clust_g2: Option<f64>,
    #[serde(rename = "E_mean_G1")]
    pub e_mean_g1: Option<f64>,
    #[serde(rename = "E_mean_G2")]
    pub e_mean_g2: Option<f64>,
    #[serde(rename = "E_at_1")]
    pub e_at_1: Option<f64>,
    #[serde(rename = "E_at_2")]
    pub e_at_2: Option<f64>,
}

impl ReportRow {
    fn metrics(&self) -> [Option<f64>; 6] {
        [self.e_clust_g1, self.e_clust_g2, self.e_mean_g1, self.e_mean_g2, self.e_at_1, self.e_at_2]
    }
}

/// Mean over seeds; `std` is the sample standard deviation and needs at
/// least two values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n >= 2).then(|| {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        });
        Some(Self { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model: String,
    pub shots: Option<usize>,
    pub seeds: usize,
    pub failed_seeds: usize,
    pub e_clust_g1: Option<Stat>,
    pub e_clust_g2: Option<Stat>,
    pub e_mean_g1: Option<Stat>,
    pub e_mean_g2: Option<Stat>,
    pub e_at_1: Option<Stat>,
    pub e_at_2: Option<Stat>,
}

/// A method that could not be evaluated under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub model: String,
    pub shots: Option<usize>,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub dataset_name: String,
    pub dataset_hash: String,
    pub trials: usize,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub cluster_rule: GroupingRule,
    /// Benchmark configuration as run.
    pub config: serde_json::Value,
    pub per_seed: Vec<SeedInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub meta: ReportMeta,
    pub rows: Vec<ReportRow>,
    pub failures: Vec<Failure>,
    pub aggregate: Vec<AggregateRow>,
}

/// Per (model, shots) statistics in first-appearance order.
pub fn aggregate(rows: &[ReportRow], failures: &[Failure]) -> Vec<AggregateRow> {
    let mut order: Vec<(String, Option<usize>)> = Vec::new();
    let mut groups: BTreeMap<(String, Option<usize>), Vec<&ReportRow>> = BTreeMap::new();
    let keys = rows
        .iter()
        .map(|r| (r.model.clone(), r.shots))
        .chain(failures.iter().map(|f| (f.model.clone(), f.shots)));
    for key in keys {
        if !order.contains(&key) {
            order.push(key.clone());
        }
    }
    for r in rows {
        groups.entry((r.model.clone(), r.shots)).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let members = groups.get(&key).cloned().unwrap_or_default();
            let stat = |i: usize| {
                let vals: Vec<f64> = members.iter().filter_map(|r| r.metrics()[i]).collect();
                Stat::of(&vals)
            };
            AggregateRow {
                failed_seeds: failures.iter().filter(|f| (f.model.clone(), f.shots) == key).count(),
                model: key.0,
                shots: key.1,
                seeds: members.len(),
                e_clust_g1: stat(0),
                e_clust_g2: stat(1),
                e_mean_g1: stat(2),
                e_mean_g2: stat(3),
                e_at_1: stat(4),
                e_at_2: stat(5),
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn opt_usize(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricReport {
    pub fn find(&self, model: &str, shots: Option<usize>) -> Option<&AggregateRow> {
        self.aggregate.iter().find(|a| a.model == model && a.shots == shots)
    }

    pub fn rows_for(&self, model: &str, shots: Option<usize>) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.model == model && r.shots == shots).collect()
    }

    /// Per-seed table; empty cells for absent values.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "model", "shots", "seed", "E_clust_G1", "E_clust_G2", "E_mean_G1", "E_mean_G2", "E_at_1", "E_at_2",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.model.clone(), opt_usize(r.shots), r.seed.to_string()];
            rec.extend(r.metrics().iter().map(|&m| opt(m)));
            w.write_record(&rec).map_err(csv_err)?;
        }
        finish(w)
    }

    /// Aggregated table: mean and std per metric.
    pub fn to_aggregate_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["model".to_string(), "shots".into(), "seeds".into(), "failed_seeds".into()];
        for m in METRIC_NAMES {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_std"));
        }
        w.write_record(&header).map_err(csv_err)?;
        for a in &self.aggregate {
            let mut rec = vec![a.model.clone(), opt_usize(a.shots), a.seeds.to_string(), a.failed_seeds.to_string()];
            for s in a.stats() {
                rec.push(opt(s.map(|s| s.mean)));
                rec.push(opt(s.and_then(|s| s.std)));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        finish(w)
    }

    /// Human-readable table: `mean (std)` per cell, `-` when absent.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Dataset `{}` ({} trials, sha256 `{}`), seeds {:?}, cluster threshold {:.4}.\n",
            self.meta.dataset_name,
            self.meta.trials,
            self.meta.dataset_hash,
            self.meta.seeds,
            self.meta.cluster_rule.threshold
        );
        out.push_str("| Model | Shots | E_clust G1 | E_clust G2 | E_mean G1 | E_mean G2 | E@1 | E@2 |\n");
        out.push_str("|---|---|---|---|---|---|---|---|\n");
        for a in &self.aggregate {
            let cells: Vec<String> = a
                .stats()
                .iter()
                .map(|s| match s {
                    Some(Stat { mean, std: Some(sd), .. }) => format!("{mean:.4} ({sd:.4})"),
                    Some(Stat { mean, std: None, .. }) => format!("{mean:.4}"),
                    None => "-".into(),
                })
                .collect();
            let shots = a.shots.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
            let model = if a.failed_seeds > 0 {
                format!("{} ({} failed)", a.model, a.failed_seeds)
            } else {
                a.model.clone()
            };
            let _ = writeln!(out, "| {model} | {shots} | {} |", cells.join(" | "));
        }
        out
    }

    /// Writes `report.json`, `report.csv`, `report_aggregate.csv` and
    /// `report.md` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)? + "\n")?;
        std::fs::write(dir.join("report.csv"), self.to_csv()?)?;
        std::fs::write(dir.join("report_aggregate.csv"), self.to_aggregate_csv()?)?;
        std::fs::write(dir.join("report.md"), self.to_markdown())?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

const METRIC_NAMES: [&str; 6] = ["E_clust_G1", "E_clust_G2", "E_mean_G1", "E_mean_G2", "E_at_1", "E_at_2"];

impl AggregateRow {
    fn stats(&self) -> [Option<Stat>; 6] {
        [self.e_clust_g1, self.e_clust_g2, self.e_mean_g1, self.e_mean_g2, self.e_at_1, self.e_at_2]
    }
}

fn csv_err(e: csv::Error) -> MagnetError {
    MagnetError::Io(std::io::Error::other(e.to_string()))
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| MagnetError::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| MagnetError::Io(std::io::Error::other(e.to_string())))
}
