//! End-to-end stages: pool scoring, review reports, annotation rollouts,
//! SFT export and dataset analyses.

pub mod analysis;
pub mod annotate;
pub mod config;
pub mod export;
pub mod report;
pub mod score;

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use crate::backends::BackendError;
use crate::environments::EnvError;
use crate::model::{Diagnostic, Guideline, ModelError, ScoreRecord, Trajectory};
use crate::prompt::{PromptParts, ScoreTarget, Template};

pub use analysis::{dataset_stats, difficulty_shift, DatasetStats};
pub use annotate::{annotate, AnnotateOptions, AnnotateOutcome};
pub use config::{BackendSpec, RunConfig};
pub use export::{export_sft, validate_sft, Message, Role, SftRecord};
pub use report::review_report;
pub use score::{embed_pool, score_pool, ScoreOptions, ScoreOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("backend failure on {question_id}: {source}")]
    Backend {
        question_id: String,
        #[source]
        source: BackendError,
        /// Records finished before the failure, already sorted.
        partial: Box<ScoreOutcome>,
    },
    #[error("backend failure on {question_id}: {source}")]
    AnnotateBackend {
        question_id: String,
        #[source]
        source: BackendError,
        partial: Box<AnnotateOutcome>,
    },
    #[error("environment failure on {question_id}: {source}")]
    Env {
        question_id: String,
        #[source]
        source: EnvError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Invalid(String),
}

/// Prompt pieces shared by every stage.
#[derive(Debug, Clone, Default)]
pub struct PromptContext {
    pub instruction: String,
    pub exemplars: Vec<String>,
    pub template: Template,
    pub target: ScoreTarget,
}

impl PromptContext {
    pub fn parts<'a>(&'a self, guideline: Option<&'a Guideline>) -> PromptParts<'a> {
        PromptParts {
            instruction: &self.instruction,
            guideline,
            exemplars: &self.exemplars,
            template: &self.template,
            target: self.target,
        }
    }
}

/// Splits an exemplar file into exemplars separated by lines holding `---`.
pub fn parse_exemplars(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for line in text.lines() {
        if line.trim_end() == "---" {
            push_exemplar(&mut out, &mut current);
        } else {
            current.push_str(line);
            current.push('\n');
        }
    }
    push_exemplar(&mut out, &mut current);
    out
}

fn push_exemplar(out: &mut Vec<String>, current: &mut String) {
    let trimmed = current.trim_matches('\n');
    if !trimmed.is_empty() {
        out.push(trimmed.to_string());
    }
    current.clear();
}

/// Keeps the first trajectory per question and reports the ids of the rest.
pub fn first_per_question(trajectories: &[Trajectory]) -> (Vec<&Trajectory>, Vec<String>) {
    let mut seen = std::collections::HashSet::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for t in trajectories {
        if seen.insert(t.question_id.as_str()) {
            kept.push(t);
        } else {
            dropped.push(t.question_id.clone());
        }
    }
    (kept, dropped)
}

/// Applies `f` to every item on a bounded pool of scoped threads.
///
/// Once `halt` returns true for some result, workers stop claiming new
/// items; items already in flight still finish. Unclaimed slots stay `None`.
pub(crate) fn parallel_map<T, R, F, H>(items: &[T], workers: usize, halt: H, f: F) -> Vec<Option<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
    H: Fn(&R) -> bool + Sync,
{
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let workers = workers.clamp(1, items.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                if halt(&r) {
                    stop.store(true, Ordering::SeqCst);
                }
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("worker panicked")
}

pub(crate) fn diagnostic(question_id: &str, stage: &str, error: impl ToString) -> Diagnostic {
    Diagnostic {
        question_id: question_id.to_string(),
        stage: stage.to_string(),
        error: error.to_string(),
    }
}

pub(crate) fn sort_records(records: &mut [ScoreRecord]) {
    records.sort_by(|a, b| a.question_id.cmp(&b.question_id));
}
