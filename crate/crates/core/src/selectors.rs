//! Selection strategies: lowest GE, random, mean entropy, high score and
//! facility location.
//!
//! Every selector returns at most `k` distinct ids, is deterministic for a
//! given input and seed, and breaks ties by ascending question id.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use thiserror::Error;

use crate::model::{Question, ScoreRecord, SelectedItem, SelectionResult, Strategy, Trajectory};

pub const DEFAULT_REWARD_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SelectError {
    #[error("score record {0:?} has no mean_entropy")]
    MissingEntropy(String),
    #[error("embedding {id:?} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("similarity matrix is not square")]
    NotSquare,
    #[error("selected index {0} is out of range")]
    IndexOutOfRange(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorConfig {
    pub strategy: Strategy,
    pub k: usize,
    pub seed: u64,
    pub reward_tolerance: f64,
}

impl SelectorConfig {
    pub fn new(strategy: Strategy, k: usize) -> Self {
        Self {
            strategy,
            k,
            seed: 0,
            reward_tolerance: DEFAULT_REWARD_TOLERANCE,
        }
    }
}

fn params(k: usize, seed: Option<u64>) -> BTreeMap<String, serde_json::Value> {
    let mut p = BTreeMap::new();
    p.insert("k".to_string(), json!(k));
    if let Some(seed) = seed {
        p.insert("seed".to_string(), json!(seed));
    }
    p
}

fn result(
    strategy: Strategy,
    params: BTreeMap<String, serde_json::Value>,
    items: Vec<SelectedItem>,
) -> SelectionResult {
    SelectionResult {
        strategy,
        params,
        items,
        warning: None,
    }
}

/// The `k` lowest-GE questions (guideline least helpful first).
///
/// Ordering uses the facilitation convention whatever sign the records were
/// stored under, so flipping the sign flag never flips the selection.
pub fn select_ge(scores: &[ScoreRecord], k: usize) -> SelectionResult {
    let mut ranked: Vec<&ScoreRecord> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        a.facilitation_ge()
            .total_cmp(&b.facilitation_ge())
            .then_with(|| a.question_id.cmp(&b.question_id))
    });
    let mut seen = HashSet::new();
    let items = ranked
        .into_iter()
        .filter(|r| seen.insert(r.question_id.as_str()))
        .take(k)
        .map(|r| SelectedItem {
            question_id: r.question_id.clone(),
            score: r.ge,
        })
        .collect();
    result(Strategy::Ge, params(k, None), items)
}

fn seeded_sample(mut ids: Vec<String>, k: usize, seed: u64) -> Vec<String> {
    ids.sort();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = k.min(ids.len());
    let (picked, _) = ids.partial_shuffle(&mut rng, take);
    picked.to_vec()
}

/// Uniform sample without replacement; scores are all zero.
pub fn select_random(pool: &[Question], k: usize, seed: u64) -> SelectionResult {
    let ids = pool.iter().map(|q| q.id.clone()).collect();
    let items = seeded_sample(ids, k, seed)
        .into_iter()
        .map(|question_id| SelectedItem {
            question_id,
            score: 0.0,
        })
        .collect();
    result(Strategy::Random, params(k, Some(seed)), items)
}

/// Most uncertain first.
pub fn select_mean_entropy(
    scores: &[ScoreRecord],
    k: usize,
) -> Result<SelectionResult, SelectError> {
    let mut ranked = Vec::with_capacity(scores.len());
    for r in scores {
        let h = r
            .mean_entropy
            .ok_or_else(|| SelectError::MissingEntropy(r.question_id.clone()))?;
        ranked.push((h, r.question_id.as_str()));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let mut seen = HashSet::new();
    let items = ranked
        .into_iter()
        .filter(|(_, id)| seen.insert(*id))
        .take(k)
        .map(|(h, id)| SelectedItem {
            question_id: id.to_string(),
            score: h,
        })
        .collect();
    Ok(result(Strategy::Entropy, params(k, None), items))
}

/// Seeded sample of trajectories with reward 1 (within `tolerance`).
///
/// When fewer than `k` qualify, all of them are returned and the result
/// carries a warning.
pub fn select_high_score(
    trajectories: &[Trajectory],
    k: usize,
    seed: u64,
    tolerance: f64,
) -> SelectionResult {
    let mut seen = HashSet::new();
    let perfect: Vec<String> = trajectories
        .iter()
        .filter(|t| seen.insert(t.question_id.as_str()))
        .filter(|t| (t.reward - 1.0).abs() <= tolerance)
        .map(|t| t.question_id.clone())
        .collect();
    let count = perfect.len();
    let rewards: BTreeMap<&str, f64> = trajectories
        .iter()
        .rev()
        .map(|t| (t.question_id.as_str(), t.reward))
        .collect();
    let items = seeded_sample(perfect, k, seed)
        .into_iter()
        .map(|id| SelectedItem {
            score: rewards[id.as_str()],
            question_id: id,
        })
        .collect();
    let mut p = params(k, Some(seed));
    p.insert("reward_tolerance".to_string(), json!(tolerance));
    let mut r = result(Strategy::Highscore, p, items);
    if count < k {
        r.warning = Some(format!(
            "only {count} trajectories with reward 1 available for k = {k}"
        ));
    }
    r
}

/// Σ_i max(0, max_{j ∈ selected} sim(i, j)); zero for the empty set.
pub fn fl_objective(selected: &[usize], sim: &[Vec<f64>]) -> Result<f64, SelectError> {
    let n = sim.len();
    if sim.iter().any(|row| row.len() != n) {
        return Err(SelectError::NotSquare);
    }
    if let Some(&bad) = selected.iter().find(|&&j| j >= n) {
        return Err(SelectError::IndexOutOfRange(bad));
    }
    Ok(sim
        .iter()
        .map(|row| selected.iter().fold(0.0f64, |best, &j| best.max(row[j])))
        .sum())
}

fn unit(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(PartialEq)]
struct Candidate {
    gain: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain
            .total_cmp(&other.gain)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Greedy facility location under cosine similarity clamped at zero.
///
/// Each step adds the point with the largest marginal gain (ties to the
/// smaller id); the item score is that gain. Gains are re-evaluated lazily:
/// a stale gain is an upper bound on the fresh one, and that holds in
/// floating point too because every term and the summation order are
/// monotone, so the output is identical to plain greedy.
pub fn select_facility_location(
    embeddings: &[(String, Vec<f64>)],
    k: usize,
) -> Result<SelectionResult, SelectError> {
    let mut entries: Vec<&(String, Vec<f64>)> = embeddings.iter().collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    entries.dedup_by(|a, b| a.0 == b.0);
    if let Some(first) = entries.first() {
        let dim = first.1.len();
        if let Some(bad) = entries.iter().find(|e| e.1.len() != dim) {
            return Err(SelectError::DimensionMismatch {
                id: bad.0.clone(),
                expected: dim,
                got: bad.1.len(),
            });
        }
    }
    let vectors: Vec<Vec<f64>> = entries.iter().map(|e| unit(&e.1)).collect();
    let n = vectors.len();
    let sim = |i: usize, j: usize| dot(&vectors[i], &vectors[j]).max(0.0);
    let mut cover = vec![0.0f64; n];
    let gain =
        |j: usize, cover: &[f64]| -> f64 { (0..n).map(|i| (sim(i, j) - cover[i]).max(0.0)).sum() };

    let mut heap: BinaryHeap<Candidate> = (0..n)
        .map(|j| Candidate {
            gain: gain(j, &cover),
            index: j,
        })
        .collect();
    let mut items = Vec::with_capacity(k.min(n));
    while items.len() < k {
        let Some(top) = heap.pop() else { break };
        let fresh = Candidate {
            gain: gain(top.index, &cover),
            index: top.index,
        };
        if heap.peek().is_some_and(|next| *next > fresh) {
            heap.push(fresh);
            continue;
        }
        for (i, c) in cover.iter_mut().enumerate() {
            *c = c.max(sim(i, fresh.index));
        }
        items.push(SelectedItem {
            question_id: entries[fresh.index].0.clone(),
            score: fresh.gain,
        });
    }
    Ok(result(Strategy::Fl, params(k, None), items))
}
