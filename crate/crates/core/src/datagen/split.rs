use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::record::TrialRecord;
use crate::error::{MagnetError, Result};

/// Test and validation trials drawn from every size x speed cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub test_per_cell: usize,
    pub val_per_cell: usize,
}

impl SplitConfig {
    pub fn for_dim(dim: usize) -> Self {
        if dim == 3 {
            Self { test_per_cell: 24, val_per_cell: 6 }
        } else {
            Self { test_per_cell: 96, val_per_cell: 24 }
        }
    }
}

/// Indices into the source trial list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub test: Vec<usize>,
    pub val: Vec<usize>,
    /// Everything else; few-shot training sets are drawn from here.
    pub pool: Vec<usize>,
}

type CellKey = (u64, u64);

fn cell_key(t: &TrialRecord) -> Result<CellKey> {
    let target = t
        .targets
        .iter()
        .find(|x| x.intended)
        .ok_or_else(|| MagnetError::Split(format!("trial {} has no intended target", t.trial_id)))?;
    Ok((target.state.size.to_bits(), target.state.speed.to_bits()))
}

/// Per size x speed cell, `test + val` held-out trials spread as evenly as
/// possible over the (user, scenario) subgroups of the cell, so that every
/// participant keeps trials in the pool. Deterministic in `seed`.
pub fn split_dataset(trials: &[TrialRecord], cfg: SplitConfig, seed: u64) -> Result<Split> {
    let mut cells: BTreeMap<CellKey, BTreeMap<(u32, String), Vec<usize>>> = BTreeMap::new();
    for (i, t) in trials.iter().enumerate() {
        cells
            .entry(cell_key(t)?)
            .or_default()
            .entry((t.user.id, t.scenario_id.clone()))
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hold = cfg.test_per_cell + cfg.val_per_cell;
    let mut split = Split { test: vec![], val: vec![], pool: vec![] };
    for ((w, v), groups) in cells {
        let total: usize = groups.values().map(Vec::len).sum();
        if total < hold {
            return Err(MagnetError::Split(format!(
                "cell (W={}, V={}) has {total} trials, needs {hold} for test and validation",
                f64::from_bits(w),
                f64::from_bits(v)
            )));
        }
        let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
        for g in &mut groups {
            g.shuffle(&mut rng);
        }
        // round-robin so quotas differ by at most one between subgroups
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.shuffle(&mut rng);
        let mut taken = vec![0usize; groups.len()];
        let mut held = Vec::with_capacity(hold);
        while held.len() < hold {
            let mut progressed = false;
            for &g in &order {
                if held.len() == hold {
                    break;
                }
                if taken[g] < groups[g].len() {
                    held.push(groups[g][taken[g]]);
                    taken[g] += 1;
                    progressed = true;
                }
            }
            debug_assert!(progressed);
        }
        held.shuffle(&mut rng);
        split.test.extend_from_slice(&held[..cfg.test_per_cell]);
        split.val.extend_from_slice(&held[cfg.test_per_cell..]);
        for (g, members) in groups.iter().enumerate() {
            split.pool.extend_from_slice(&members[taken[g]..]);
        }
    }
    split.test.sort_unstable();
    split.val.sort_unstable();
    split.pool.sort_unstable();
    Ok(split)
}

/// `shots` trials per user x size x speed cell of the pool, optionally also
/// keyed by gesture. Fails if any cell has fewer than `shots` trials.
pub fn few_shot_subset(
    trials: &[TrialRecord],
    pool: &[usize],
    shots: usize,
    include_gesture: bool,
    seed: u64,
) -> Result<Vec<usize>> {
    if shots == 0 {
        return Err(MagnetError::Split("few-shot subset needs at least one shot".into()));
    }
    let mut cells: BTreeMap<(u32, Option<String>, CellKey), Vec<usize>> = BTreeMap::new();
    for &i in pool {
        let t = trials
            .get(i)
            .ok_or_else(|| MagnetError::Split(format!("pool index {i} out of range")))?;
        let gesture = include_gesture.then(|| t.user.profile.gesture.to_string());
        cells.entry((t.user.id, gesture, cell_key(t)?)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cells.len() * shots);
    for ((user, gesture, (w, v)), mut members) in cells {
        if members.len() < shots {
            return Err(MagnetError::Split(format!(
                "user {user}{} cell (W={}, V={}) has {} pool trials, {shots} shots requested",
                gesture.map(|g| format!(" {g}")).unwrap_or_default(),
                f64::from_bits(w),
                f64::from_bits(v),
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        out.extend_from_slice(&members[..shots]);
    }
    out.sort_unstable();
    Ok(out)
}
