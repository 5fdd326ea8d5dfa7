//! Annotation rollouts: a generator acts in an environment, prompted with
//! instruction, guideline, exemplars and the history so far.

use super::{diagnostic, parallel_map, PipelineError, PromptContext};
use crate::backends::{generate, BackendError, GenerateParams, Generator};
use crate::environments::{parse_action, EnvError, EnvFactory, INVALID_ACTION};
use crate::model::{Diagnostic, Guideline, Question, Step, Trajectory, TrajectorySource};
use crate::prompt::build_generation_prompt;

pub const STAGE: &str = "annotate";

#[derive(Debug, Clone)]
pub struct AnnotateOptions {
    pub t_max: usize,
    pub parallelism: usize,
    /// Sampling parameters; the observation stops are always added.
    pub params: GenerateParams,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        Self {
            t_max: 15,
            parallelism: 4,
            params: GenerateParams {
                max_tokens: 128,
                ..GenerateParams::default()
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotateOutcome {
    /// Sorted by question id.
    pub trajectories: Vec<Trajectory>,
    /// Questions skipped after a backend failure.
    pub diagnostics: Vec<Diagnostic>,
}

/// Pulls the action out of a completion: the first non-empty line, with an
/// echoed `Action:` prefix removed. `None` when it is not `name[arg]`.
pub fn parse_generated_action(completion: &str) -> Option<String> {
    let line = completion.lines().map(str::trim).find(|l| !l.is_empty())?;
    let line = line.strip_prefix("Action:").map(str::trim).unwrap_or(line);
    parse_action(line).map(|_| line.to_string())
}

enum Failure {
    Backend(BackendError),
    Env(EnvError),
}

/// Runs one episode per question. Backend failures skip the question and
/// leave a diagnostic; an environment failure aborts the run.
pub fn annotate<G: Generator + ?Sized, F: EnvFactory + ?Sized>(
    questions: &[Question],
    guideline: &Guideline,
    ctx: &PromptContext,
    generator: &G,
    envs: &F,
    opts: &AnnotateOptions,
) -> Result<AnnotateOutcome, PipelineError> {
    if questions.is_empty() {
        return Err(PipelineError::Invalid("no questions to annotate".into()));
    }
    let mut params = opts.params.clone();
    for stop in ["\nObservation", "\n"] {
        if !params.stop.iter().any(|s| s == stop) {
            params.stop.push(stop.to_string());
        }
    }
    let results = parallel_map(
        questions,
        opts.parallelism,
        |r: &Result<Trajectory, Failure>| matches!(r, Err(Failure::Env(_))),
        |q| rollout(q, guideline, ctx, generator, envs, opts.t_max, &params),
    );
    let mut outcome = AnnotateOutcome::default();
    let mut env_failure: Option<(String, EnvError)> = None;
    for (q, r) in questions.iter().zip(results) {
        match r {
            None => {}
            Some(Ok(t)) => outcome.trajectories.push(t),
            Some(Err(Failure::Backend(e))) => {
                tracing::warn!(question_id = %q.id, error = %e, "question skipped");
                outcome.diagnostics.push(diagnostic(&q.id, STAGE, e));
            }
            Some(Err(Failure::Env(e))) if env_failure.as_ref().is_none_or(|(id, _)| q.id < *id) => {
                env_failure = Some((q.id.clone(), e));
            }
            Some(Err(Failure::Env(_))) => {}
        }
    }
    if let Some((question_id, source)) = env_failure {
        return Err(PipelineError::Env {
            question_id,
            source,
        });
    }
    outcome
        .trajectories
        .sort_by(|a, b| a.question_id.cmp(&b.question_id));
    outcome
        .diagnostics
        .sort_by(|a, b| a.question_id.cmp(&b.question_id));
    Ok(outcome)
}

fn rollout<G: Generator + ?Sized, F: EnvFactory + ?Sized>(
    question: &Question,
    guideline: &Guideline,
    ctx: &PromptContext,
    generator: &G,
    envs: &F,
    t_max: usize,
    params: &GenerateParams,
) -> Result<Trajectory, Failure> {
    let mut env = envs.create();
    let initial = env.reset(question).map_err(Failure::Env)?;
    let parts = ctx.parts(Some(guideline));
    let mut steps: Vec<Step> = Vec::new();
    let mut reward = 0.0;
    while steps.len() < t_max.max(1) {
        let prompt = build_generation_prompt(&parts, &question.text, &steps);
        let completion = match generate(generator, &prompt, params) {
            Ok(c) => Some(c),
            Err(BackendError::EmptyCompletion) => None,
            Err(e) => return Err(Failure::Backend(e)),
        };
        match completion.as_deref().and_then(parse_generated_action) {
            Some(action) => {
                let out = env.step(&action).map_err(Failure::Env)?;
                steps.push(Step::new(action, out.observation));
                if out.done {
                    reward = out.reward;
                    break;
                }
            }
            None => {
                let raw = completion.unwrap_or_default();
                let action = raw.lines().next().unwrap_or("").trim();
                let action = if action.is_empty() {
                    "(no action)"
                } else {
                    action
                };
                steps.push(Step::new(action, INVALID_ACTION));
            }
        }
    }
    Ok(Trajectory {
        question_id: question.id.clone(),
        question: question.text.clone(),
        initial_observation: Some(initial),
        guideline_version: guideline.version().to_string(),
        steps,
        reward,
        source: TrajectorySource::Annotated,
    })
}
