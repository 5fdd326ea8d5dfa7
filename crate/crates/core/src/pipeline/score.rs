//! Pool scoring: teacher-forced difficulty of every recorded action with and
//! without the guideline in the prompt.

use std::collections::HashMap;

use super::{
    diagnostic, first_per_question, parallel_map, sort_records, PipelineError, PromptContext,
};
use crate::backends::{BackendError, EchoResult, EchoScorer, Embedder};
use crate::model::{
    Diagnostic, EmbeddingRecord, GeSign, Guideline, Question, ScoreRecord, Trajectory,
};
use crate::prompt::{build_prompt, map_spans_to_tokens, PromptBundle};
use crate::scoring::{aggregate_trajectory, mean_entropy, StepLogprobs, TokenDistribution};

pub const STAGE: &str = "score";

#[derive(Debug, Clone)]
pub struct ScoreOptions {
    pub parallelism: usize,
    /// Top-k alternatives requested per token for the entropy baseline;
    /// 0 skips entropy.
    pub top_k: usize,
    pub sign: GeSign,
    /// Score only the prompt without the guideline (d_g = d_i, GE = 0).
    pub no_guideline_only: bool,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            parallelism: 4,
            top_k: 5,
            sign: GeSign::default(),
            no_guideline_only: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreOutcome {
    /// Sorted by question id.
    pub records: Vec<ScoreRecord>,
    pub diagnostics: Vec<Diagnostic>,
}

enum Failure {
    Skip(String),
    Backend(BackendError),
}

impl From<BackendError> for Failure {
    fn from(e: BackendError) -> Self {
        Failure::Backend(e)
    }
}

fn skip(e: impl ToString) -> Failure {
    Failure::Skip(e.to_string())
}

/// Scores one trajectory per question.
///
/// Alignment and data problems skip the trajectory and leave a diagnostic.
/// A backend failure stops the run; records finished so far travel in the
/// error so callers can flush them, and a rerun over a warm cache completes
/// the same output.
pub fn score_pool<S: EchoScorer + ?Sized>(
    pool: &[Question],
    trajectories: &[Trajectory],
    guideline: &Guideline,
    ctx: &PromptContext,
    scorer: &S,
    opts: &ScoreOptions,
) -> Result<ScoreOutcome, PipelineError> {
    let questions: HashMap<&str, &Question> = pool.iter().map(|q| (q.id.as_str(), q)).collect();
    let (kept, dropped) = first_per_question(trajectories);
    let mut diagnostics = Vec::new();
    for id in dropped {
        tracing::warn!(question_id = %id, "duplicate trajectory ignored");
        diagnostics.push(diagnostic(
            &id,
            STAGE,
            "duplicate trajectory ignored; first occurrence kept",
        ));
    }
    let covered: std::collections::HashSet<&str> =
        kept.iter().map(|t| t.question_id.as_str()).collect();
    for q in pool {
        if !covered.contains(q.id.as_str()) {
            tracing::warn!(question_id = %q.id, "question has no trajectory");
            diagnostics.push(diagnostic(&q.id, STAGE, "no trajectory to score"));
        }
    }

    let results = parallel_map(
        &kept,
        opts.parallelism,
        |r: &Result<ScoreRecord, Failure>| matches!(r, Err(Failure::Backend(_))),
        |t| {
            let question = questions
                .get(t.question_id.as_str())
                .ok_or_else(|| skip("question id not in pool"))?;
            score_one(question, t, guideline, ctx, scorer, opts)
        },
    );

    let mut records = Vec::new();
    let mut failure: Option<(String, BackendError)> = None;
    for (t, r) in kept.iter().zip(results) {
        match r {
            None => {}
            Some(Ok(rec)) => records.push(rec),
            Some(Err(Failure::Skip(msg))) => {
                tracing::warn!(question_id = %t.question_id, %msg, "trajectory skipped");
                diagnostics.push(diagnostic(&t.question_id, STAGE, msg));
            }
            // Report the failure with the smallest id for stable messages.
            Some(Err(Failure::Backend(e)))
                if failure.as_ref().is_none_or(|(id, _)| t.question_id < *id) =>
            {
                failure = Some((t.question_id.clone(), e));
            }
            Some(Err(Failure::Backend(_))) => {}
        }
    }
    sort_records(&mut records);
    diagnostics.sort_by(|a, b| {
        a.question_id
            .cmp(&b.question_id)
            .then(a.error.cmp(&b.error))
    });
    let outcome = ScoreOutcome {
        records,
        diagnostics,
    };
    match failure {
        None => Ok(outcome),
        Some((question_id, source)) => {
            let mut partial = outcome;
            partial
                .diagnostics
                .push(diagnostic(&question_id, STAGE, &source));
            Err(PipelineError::Backend {
                question_id,
                source,
                partial: Box::new(partial),
            })
        }
    }
}

fn score_one<S: EchoScorer + ?Sized>(
    question: &Question,
    trajectory: &Trajectory,
    guideline: &Guideline,
    ctx: &PromptContext,
    scorer: &S,
    opts: &ScoreOptions,
) -> Result<ScoreRecord, Failure> {
    if trajectory.steps.is_empty() {
        return Err(skip("trajectory has no steps"));
    }
    let without = build_prompt(&ctx.parts(None), &question.text, trajectory);
    let (per_step, ge, entropy) = if opts.no_guideline_only {
        let echo = scorer.echo_logprobs(&without.rendered, opts.top_k)?;
        let steps = action_logprobs(&without, &echo)?;
        let agg = aggregate_trajectory(&steps, &steps, opts.sign).map_err(skip)?;
        (
            agg.per_step,
            agg.ge,
            action_entropy(&without, &echo, opts.top_k)?,
        )
    } else {
        let with = build_prompt(&ctx.parts(Some(guideline)), &question.text, trajectory);
        let echo_g = scorer.echo_logprobs(&with.rendered, opts.top_k)?;
        let echo_i = scorer.echo_logprobs(&without.rendered, 0)?;
        let with_g = action_logprobs(&with, &echo_g)?;
        let without_g = action_logprobs(&without, &echo_i)?;
        let agg = aggregate_trajectory(&with_g, &without_g, opts.sign).map_err(skip)?;
        (
            agg.per_step,
            agg.ge,
            action_entropy(&with, &echo_g, opts.top_k)?,
        )
    };
    Ok(ScoreRecord {
        question_id: question.id.clone(),
        guideline_version: guideline.version().to_string(),
        backend_id: scorer.id().label(),
        per_step,
        ge,
        ge_sign: opts.sign,
        mean_entropy: entropy,
    })
}

fn action_logprobs(bundle: &PromptBundle, echo: &EchoResult) -> Result<Vec<StepLogprobs>, Failure> {
    let map = map_spans_to_tokens(bundle, &echo.tokens).map_err(skip)?;
    map.per_action
        .iter()
        .map(|range| {
            let lps = echo.tokens[range.token_start..range.token_end]
                .iter()
                .map(|t| {
                    t.logprob
                        .ok_or_else(|| skip(format!("token {:?} has no logprob", t.text)))
                })
                .collect::<Result<Vec<f64>, Failure>>()?;
            StepLogprobs::new(lps).map_err(skip)
        })
        .collect()
}

/// Mean entropy over all action tokens, `None` when no distributions were
/// requested or the backend returned none.
fn action_entropy(
    bundle: &PromptBundle,
    echo: &EchoResult,
    top_k: usize,
) -> Result<Option<f64>, Failure> {
    if top_k == 0 {
        return Ok(None);
    }
    let map = map_spans_to_tokens(bundle, &echo.tokens).map_err(skip)?;
    let mut dists: Vec<TokenDistribution> = Vec::new();
    for range in &map.per_action {
        for tok in &echo.tokens[range.token_start..range.token_end] {
            match tok.distribution() {
                Some(d) => dists.push(d.map_err(skip)?),
                None => return Ok(None),
            }
        }
    }
    Ok(Some(mean_entropy(&dists).map_err(skip)?))
}

/// Embeds every question text, sorted by question id.
pub fn embed_pool<E: Embedder + ?Sized>(
    pool: &[Question],
    embedder: &E,
    parallelism: usize,
) -> Result<Vec<EmbeddingRecord>, (String, BackendError)> {
    let results = parallel_map(
        pool,
        parallelism,
        |r: &Result<_, _>| r.is_err(),
        |q| {
            embedder
                .embed(&q.text)
                .map(|vector| EmbeddingRecord {
                    question_id: q.id.clone(),
                    vector,
                })
                .map_err(|e| (q.id.clone(), e))
        },
    );
    let mut out = Vec::with_capacity(pool.len());
    for r in results.into_iter().flatten() {
        out.push(r?);
    }
    out.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    out.dedup_by(|a, b| a.question_id == b.question_id);
    Ok(out)
}
