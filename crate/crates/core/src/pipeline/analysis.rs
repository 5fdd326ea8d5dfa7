//! Dataset statistics and difficulty-mix shift of a selection.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::model::{Question, SelectionResult, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub avg_turns: f64,
    pub avg_reward_pct: f64,
}

pub fn dataset_stats(trajectories: &[Trajectory]) -> Result<DatasetStats, PipelineError> {
    if trajectories.is_empty() {
        return Err(PipelineError::Invalid("no trajectories".into()));
    }
    let n = trajectories.len() as f64;
    let turns: f64 = trajectories.iter().map(|t| t.turns() as f64).sum();
    let reward: f64 = trajectories.iter().map(|t| t.reward).sum();
    Ok(DatasetStats {
        avg_turns: turns / n,
        avg_reward_pct: 100.0 * reward / n,
    })
}

/// Percentage-point change of each difficulty level's share between the
/// pool and the selection. Levels present in either appear in the output.
pub fn difficulty_shift(
    selected: &SelectionResult,
    pool: &[Question],
) -> Result<BTreeMap<String, f64>, PipelineError> {
    let mut levels: HashMap<&str, &str> = HashMap::new();
    for q in pool {
        let level = q.level().ok_or_else(|| {
            PipelineError::Invalid(format!("pool question {} has no level", q.id))
        })?;
        levels.entry(q.id.as_str()).or_insert(level);
    }
    if levels.is_empty() {
        return Err(PipelineError::Invalid("empty pool".into()));
    }
    if selected.is_empty() {
        return Err(PipelineError::Invalid("empty selection".into()));
    }
    let mut pool_counts: BTreeMap<String, usize> = BTreeMap::new();
    for level in levels.values() {
        *pool_counts.entry(level.to_string()).or_default() += 1;
    }
    let mut sel_counts: BTreeMap<String, usize> = BTreeMap::new();
    for id in selected.ids() {
        let level = levels.get(id).ok_or_else(|| {
            PipelineError::Invalid(format!("selected question {id} has no level in the pool"))
        })?;
        *sel_counts.entry(level.to_string()).or_default() += 1;
    }
    let pool_n = levels.len() as f64;
    let sel_n = selected.len() as f64;
    let mut out = BTreeMap::new();
    for level in pool_counts.keys().chain(sel_counts.keys()) {
        let p = pool_counts.get(level).copied().unwrap_or(0) as f64 / pool_n;
        let s = sel_counts.get(level).copied().unwrap_or(0) as f64 / sel_n;
        out.insert(level.clone(), 100.0 * (s - p));
    }
    Ok(out)
}
