//! Vibration-intensity measures, regime grouping, error metrics, baselines
//! and the multi-seed benchmark.

mod baselines;
mod benchmark;
mod metrics;
mod report;

pub use baselines::{baseline_predict, best_single_expert, Baseline};
pub use benchmark::{evaluate_model, run_benchmark, Ablation, BenchmarkConfig, SeedInfo};
pub use metrics::{error_at_k, grouped_errors, GroupedErrors, MethodOutput, Outcome};
pub use report::{aggregate, AggregateRow, MetricReport, ReportMeta, ReportRow, Stat};

use serde::{Deserialize, Serialize};

use crate::error::{MagnetError, Result};

/// Root-mean-square acceleration: per-axis RMS over the window combined as
/// `sqrt(rms_x^2 + rms_y^2 + rms_z^2)`. No frequency weighting.
pub fn rmsa(acc: &[[f64; 3]]) -> Result<f64> {
    if acc.is_empty() {
        return Err(MagnetError::Input("RMSA of an empty window".into()));
    }
    let n = acc.len() as f64;
    let total: f64 = (0..3)
        .map(|c| acc.iter().map(|a| a[c] * a[c]).sum::<f64>() / n)
        .sum();
    Ok(total.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupingKind {
    ClusterMidpoint,
    Mean,
}

/// Splits trials into a low (G1, `rmsa < threshold`) and a high (G2) regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupingRule {
    pub kind: GroupingKind,
    pub threshold: f64,
    /// Sorted cluster centers; cluster rule only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centers: Option<Vec<f64>>,
    /// Midpoints between adjacent centers; cluster rule only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub midpoints: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub silhouette: Option<f64>,
    /// Mean of the values; mean rule only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
}

impl GroupingRule {
    pub fn mean_rule(values: &[f64]) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(MagnetError::Input("mean rule needs finite values".into()));
        }
        let m = values.iter().sum::<f64>() / values.len() as f64;
        Ok(Self { kind: GroupingKind::Mean, threshold: m, centers: None, midpoints: None, silhouette: None, mean: Some(m) })
    }

    /// `true` for the high-intensity regime.
    pub fn is_high(&self, rmsa: f64) -> bool {
        rmsa >= self.threshold
    }
}

pub const MIN_CLUSTER_VALUES: usize = 10;
pub const MAX_CLUSTERS: usize = 5;

/// 1-D k-means for k in 2..=5, keeping the k with the largest mean
/// silhouette. Thresholds are midpoints of adjacent sorted centers; the
/// reported threshold is the midpoint nearest the overall mean (the only
/// one when k = 2).
pub fn cluster_threshold(values: &[f64]) -> Result<GroupingRule> {
    if values.len() < MIN_CLUSTER_VALUES {
        return Err(MagnetError::Input(format!(
            "clustering needs at least {MIN_CLUSTER_VALUES} values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(MagnetError::Input("clustering values must be finite".into()));
    }
    let mut xs = values.to_vec();
    xs.sort_by(f64::total_cmp);
    if xs[0] == xs[xs.len() - 1] {
        return Err(MagnetError::Degenerate(format!("all {} values equal {}", xs.len(), xs[0])));
    }
    let mut prefix = vec![0.0; xs.len() + 1];
    for (i, x) in xs.iter().enumerate() {
        prefix[i + 1] = prefix[i] + x;
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for k in 2..=MAX_CLUSTERS {
        let Some(bounds) = kmeans_1d(&xs, &prefix, k) else { continue };
        let s = silhouette_1d(&xs, &prefix, &bounds);
        if best.as_ref().map_or(true, |(b, _)| s > *b) {
            let centers = bounds.windows(2).map(|w| (prefix[w[1]] - prefix[w[0]]) / (w[1] - w[0]) as f64).collect();
            best = Some((s, centers));
        }
    }
    let (silhouette, centers) = best.ok_or_else(|| MagnetError::Degenerate("no clustering with 2 or more clusters".into()))?;
    let midpoints: Vec<f64> = centers.windows(2).map(|w: &[f64]| 0.5 * (w[0] + w[1])).collect();
    let mean = prefix[xs.len()] / xs.len() as f64;
    let threshold = midpoints
        .iter()
        .copied()
        .min_by(|a, b| (a - mean).abs().total_cmp(&(b - mean).abs()))
        .expect("k >= 2");
    Ok(GroupingRule {
        kind: GroupingKind::ClusterMidpoint,
        threshold,
        centers: Some(centers),
        midpoints: Some(midpoints),
        silhouette: Some(silhouette),
        mean: None,
    })
}

/// Lloyd iterations on sorted data, started from quantiles. Clusters are
/// contiguous index ranges `bounds[j]..bounds[j + 1]`. `None` when fewer
/// than `k` distinct values exist.
fn kmeans_1d(xs: &[f64], prefix: &[f64], k: usize) -> Option<Vec<usize>> {
    let n = xs.len();
    let mut distinct = 1;
    for w in xs.windows(2) {
        if w[1] > w[0] {
            distinct += 1;
        }
    }
    if distinct < k {
        return None;
    }
    let mut centers: Vec<f64> = (0..k).map(|j| xs[((2 * j + 1) * n) / (2 * k)]).collect();
    centers.dedup();
    if centers.len() < k {
        // quantiles collided; spread centers over the range instead
        let (lo, hi) = (xs[0], xs[n - 1]);
        centers = (0..k).map(|j| lo + (hi - lo) * (j as f64 + 0.5) / k as f64).collect();
    }
    let mut bounds = vec![0; k + 1];
    for _ in 0..1000 {
        bounds[0] = 0;
        bounds[k] = n;
        for j in 1..k {
            let cut = 0.5 * (centers[j - 1] + centers[j]);
            bounds[j] = xs.partition_point(|&x| x < cut).max(bounds[j - 1]);
        }
        if bounds.windows(2).any(|w| w[1] == w[0]) {
            return None;
        }
        let next: Vec<f64> = bounds
            .windows(2)
            .map(|w| (prefix[w[1]] - prefix[w[0]]) / (w[1] - w[0]) as f64)
            .collect();
        if next == centers {
            break;
        }
        centers = next;
    }
    Some(bounds)
}

/// Mean silhouette over all points; singleton clusters score 0.
fn silhouette_1d(xs: &[f64], prefix: &[f64], bounds: &[usize]) -> f64 {
    // sum of |x - y| over y in xs[a..b]
    let abs_sum = |x: f64, a: usize, b: usize| -> f64 {
        let m = a + xs[a..b].partition_point(|&y| y < x);
        let below = x * (m - a) as f64 - (prefix[m] - prefix[a]);
        let above = (prefix[b] - prefix[m]) - x * (b - m) as f64;
        below + above
    };
    let k = bounds.len() - 1;
    let mut total = 0.0;
    for c in 0..k {
        let (a, b) = (bounds[c], bounds[c + 1]);
        if b - a == 1 {
            continue;
        }
        for &x in &xs[a..b] {
            let intra = abs_sum(x, a, b) / (b - a - 1) as f64;
            let inter = (0..k)
                .filter(|&o| o != c)
                .map(|o| abs_sum(x, bounds[o], bounds[o + 1]) / (bounds[o + 1] - bounds[o]) as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = intra.max(inter);
            if denom > 0.0 {
                total += (inter - intra) / denom;
            }
        }
    }
    total / xs.len() as f64
}
