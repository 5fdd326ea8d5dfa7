//! Subcommand implementations and the mapping from failures to exit codes.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};

use gesel::backends::cache::DEFAULT_CACHE_DIR;
use gesel::environments::http::HttpEnvFactory;
use gesel::environments::replay::ReplayLibrary;
use gesel::environments::toyshop::{toyshop_make, ToyShop};
use gesel::environments::EnvFactory;
use gesel::model::{
    load_pool, load_scores, load_selection, load_trajectories, read_records, write_records,
    write_selection, EmbeddingRecord, Guideline, ModelError, Question, SelectionResult, Strategy,
};
use gesel::pipeline::config::{build_embedder, build_generator, build_scorer};
use gesel::pipeline::{
    annotate, dataset_stats, difficulty_shift, embed_pool, export_sft, review_report, score_pool,
    AnnotateOptions, PipelineError, RunConfig, ScoreOptions,
};
use gesel::selectors::{
    select_facility_location, select_ge, select_high_score, select_mean_entropy, select_random,
    DEFAULT_REWARD_TOLERANCE,
};

use crate::{
    AnnotateArgs, Command, EmbedArgs, EnvKind, ExportArgs, MakeToyshopArgs, ReportArgs, ScoreArgs,
    SelectArgs, StatsArgs,
};

pub const USAGE: u8 = 1;
pub const FILE: u8 = 2;
pub const BACKEND: u8 = 3;
pub const ENV: u8 = 4;

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

fn fail(code: u8, error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code,
        error: error.into(),
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        fail(FILE, e)
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Backend { .. } | PipelineError::AnnotateBackend { .. } => BACKEND,
            PipelineError::Env { .. } => ENV,
            PipelineError::Model(_) | PipelineError::Invalid(_) => FILE,
        };
        fail(code, e)
    }
}

type Outcome = Result<(), Failure>;

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Score(a) => score(a),
        Command::Select(a) => select(a),
        Command::Report(a) => report(a),
        Command::Annotate(a) => annotate_cmd(a),
        Command::Export(a) => export(a),
        Command::Stats(a) => stats(a),
        Command::Embed(a) => embed(a),
        Command::MakeToyshop(a) => make_toyshop(a),
    }
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    out.with_file_name(name)
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(|e| fail(FILE, e))
}

fn cache_dir(flag: Option<PathBuf>, config: &RunConfig) -> PathBuf {
    flag.or_else(|| config.cache_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR))
}

fn positive(name: &str, n: usize) -> Result<usize, Failure> {
    if n == 0 {
        Err(fail(USAGE, anyhow!("--{name} must be at least 1")))
    } else {
        Ok(n)
    }
}

fn score(a: ScoreArgs) -> Outcome {
    let config = RunConfig::load(&a.config)?;
    let pool = load_pool(&a.pool)?;
    let trajectories = load_trajectories(&a.trajectories)?;
    let guideline = Guideline::load(&a.guideline)?;
    let ctx = config.prompt_context()?;
    let cache = config.open_cache(Some(&cache_dir(a.cache_dir, &config)))?;
    let scorer = build_scorer(config.score_backend.as_ref(), cache)?;
    let opts = ScoreOptions {
        parallelism: positive("parallel", a.parallel.unwrap_or(config.parallelism))?,
        top_k: config.top_k,
        sign: a.ge_sign.unwrap_or(config.ge_sign),
        no_guideline_only: a.no_guideline_only,
    };
    let diagnostics_path = a
        .diagnostics
        .unwrap_or_else(|| sidecar(&a.out, ".diagnostics.jsonl"));
    let marker = sidecar(&a.out, ".incomplete");
    match score_pool(
        &pool,
        &trajectories,
        &guideline,
        &ctx,
        scorer.as_ref(),
        &opts,
    ) {
        Ok(outcome) => {
            write_records(&outcome.records, &a.out)?;
            write_records(&outcome.diagnostics, &diagnostics_path)?;
            if marker.exists() {
                std::fs::remove_file(&marker).map_err(|e| fail(FILE, e))?;
            }
            tracing::info!(
                scored = outcome.records.len(),
                skipped = outcome.diagnostics.len(),
                "scoring done"
            );
            Ok(())
        }
        Err(PipelineError::Backend {
            question_id,
            source,
            partial,
        }) => {
            // Flush what finished; rerunning with the same cache resumes.
            write_records(&partial.records, &a.out)?;
            write_records(&partial.diagnostics, &diagnostics_path)?;
            write_text(
                &marker,
                &format!("incomplete: backend failure on {question_id}: {source}\nrerun the same command to resume\n"),
            )?;
            Err(fail(
                BACKEND,
                anyhow!("backend failure on {question_id}: {source}"),
            ))
        }
        Err(e) => Err(e.into()),
    }
}

fn select(a: SelectArgs) -> Outcome {
    let scores = load_scores(&a.scores)?;
    let result: SelectionResult = match a.strategy {
        Strategy::Ge => select_ge(&scores, a.k),
        Strategy::Random => {
            let pool: Vec<Question> = match &a.pool {
                Some(p) => load_pool(p)?,
                None => scores
                    .iter()
                    .map(|s| Question::new(s.question_id.clone(), ""))
                    .collect(),
            };
            select_random(&pool, a.k, a.seed)
        }
        Strategy::Entropy => select_mean_entropy(&scores, a.k).map_err(|e| fail(FILE, e))?,
        Strategy::Highscore => {
            let path = a
                .trajectories
                .as_ref()
                .ok_or_else(|| fail(USAGE, anyhow!("--strategy highscore needs --trajectories")))?;
            select_high_score(
                &load_trajectories(path)?,
                a.k,
                a.seed,
                DEFAULT_REWARD_TOLERANCE,
            )
        }
        Strategy::Fl => {
            let path = a
                .embeddings
                .as_ref()
                .ok_or_else(|| fail(USAGE, anyhow!("--strategy fl needs --embeddings")))?;
            let records: Vec<EmbeddingRecord> = read_records(path)?;
            let pairs: Vec<(String, Vec<f64>)> = records
                .into_iter()
                .map(|r| (r.question_id, r.vector))
                .collect();
            select_facility_location(&pairs, a.k).map_err(|e| fail(FILE, e))?
        }
    };
    if let Some(w) = &result.warning {
        eprintln!("warning: {w}");
    }
    write_selection(&result, &a.out)?;
    Ok(())
}

fn report(a: ReportArgs) -> Outcome {
    let m = positive("m", a.m)?;
    let scores = load_scores(&a.scores)?;
    let trajectories = load_trajectories(&a.trajectories)?;
    write_text(&a.out, &review_report(&scores, &trajectories, m))
}

/// Questions to annotate: a pool file, or a selection resolved via --pool.
fn annotate_questions(a: &AnnotateArgs) -> Result<Vec<Question>, Failure> {
    if let Ok(selection) = load_selection(&a.questions) {
        let pool_path = a.pool.as_ref().ok_or_else(|| {
            fail(
                USAGE,
                anyhow!("--questions is a selection; pass --pool for question texts"),
            )
        })?;
        let pool = load_pool(pool_path)?;
        let by_id: HashMap<&str, &Question> = pool.iter().map(|q| (q.id.as_str(), q)).collect();
        return selection
            .ids()
            .map(|id| {
                by_id
                    .get(id)
                    .map(|q| (*q).clone())
                    .ok_or_else(|| fail(FILE, anyhow!("selected question {id} is not in the pool")))
            })
            .collect();
    }
    Ok(load_pool(&a.questions)?)
}

fn annotate_cmd(a: AnnotateArgs) -> Outcome {
    let config = RunConfig::load(&a.config)?;
    let questions = annotate_questions(&a)?;
    if questions.is_empty() {
        return Err(fail(FILE, anyhow!("no questions to annotate")));
    }
    let guideline = Guideline::load(&a.guideline)?;
    let ctx = config.prompt_context()?;
    let cache = config.open_cache(Some(&cache_dir(a.cache_dir.clone(), &config)))?;
    let generator = build_generator(config.generate_backend.as_ref(), cache)?;
    let envs: Box<dyn EnvFactory> = match a.env {
        EnvKind::Toyshop => Box::new(ToyShop::new(config.toyshop.clone())),
        EnvKind::Replay => {
            let path = a
                .trajectories
                .as_ref()
                .ok_or_else(|| fail(USAGE, anyhow!("--env replay needs --trajectories")))?;
            Box::new(ReplayLibrary::new(&load_trajectories(path)?))
        }
        EnvKind::Http => {
            let url = a
                .env_url
                .as_deref()
                .ok_or_else(|| fail(USAGE, anyhow!("--env http needs --env-url")))?;
            Box::new(HttpEnvFactory::new(url).map_err(|e| fail(ENV, e))?)
        }
    };
    let opts = AnnotateOptions {
        t_max: positive("tmax", a.tmax.unwrap_or(config.t_max))?,
        parallelism: positive("parallel", a.parallel.unwrap_or(config.parallelism))?,
        params: config.generation.clone(),
    };
    let outcome = annotate(
        &questions,
        &guideline,
        &ctx,
        generator.as_ref(),
        envs.as_ref(),
        &opts,
    )?;
    write_records(&outcome.trajectories, &a.out)?;
    let diagnostics_path = a
        .diagnostics
        .unwrap_or_else(|| sidecar(&a.out, ".diagnostics.jsonl"));
    write_records(&outcome.diagnostics, &diagnostics_path)?;
    if !outcome.diagnostics.is_empty() {
        eprintln!(
            "warning: {} question(s) skipped, see {}",
            outcome.diagnostics.len(),
            diagnostics_path.display()
        );
    }
    Ok(())
}

fn export(a: ExportArgs) -> Outcome {
    let trajectories = load_trajectories(&a.trajectories)?;
    let instruction = std::fs::read_to_string(&a.instruction)
        .with_context(|| format!("reading {}", a.instruction.display()))
        .map_err(|e| fail(FILE, e))?;
    let guideline = Guideline::load(&a.guideline)?;
    let records = export_sft(&trajectories, &instruction, &guideline)?;
    write_records(&records, &a.out)?;
    Ok(())
}

fn stats(a: StatsArgs) -> Outcome {
    let trajectories = load_trajectories(&a.trajectories)?;
    let s = dataset_stats(&trajectories)?;
    let mut out = serde_json::json!({
        "avg_turns": s.avg_turns,
        "avg_reward_pct": s.avg_reward_pct,
    });
    if let (Some(sel), Some(pool)) = (&a.selected, &a.pool) {
        let shift = difficulty_shift(&load_selection(sel)?, &load_pool(pool)?)?;
        out["difficulty_shift"] = serde_json::to_value(shift).map_err(|e| fail(FILE, e))?;
    }
    let text = serde_json::to_string_pretty(&out).map_err(|e| fail(FILE, e))? + "\n";
    print!("{text}");
    if let Some(path) = &a.out {
        write_text(path, &text)?;
    }
    Ok(())
}

fn embed(a: EmbedArgs) -> Outcome {
    let config = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let pool = load_pool(&a.pool)?;
    let cache = match config.embed_backend {
        Some(gesel::pipeline::BackendSpec::Http { .. }) => {
            config.open_cache(Some(&cache_dir(a.cache_dir, &config)))?
        }
        _ => None,
    };
    let embedder = build_embedder(config.embed_backend.as_ref(), cache)?;
    let parallelism = positive("parallel", a.parallel.unwrap_or(config.parallelism))?;
    let records = embed_pool(&pool, embedder.as_ref(), parallelism)
        .map_err(|(id, e)| fail(BACKEND, anyhow!("embedding {id}: {e}")))?;
    write_records(&records, &a.out)?;
    Ok(())
}

fn make_toyshop(a: MakeToyshopArgs) -> Outcome {
    let mut shop = match &a.config {
        Some(p) => RunConfig::load(p)?.toyshop,
        None => RunConfig::default().toyshop,
    };
    if let Some(seed) = a.seed {
        shop.seed = seed;
    }
    let n = positive("questions", a.questions)?;
    let (_, pool, truth) = toyshop_make(&shop, n);
    write_records(&pool, &a.out)?;
    if let Some(path) = &a.truth {
        let text = serde_json::to_string_pretty(&truth).map_err(|e| fail(FILE, e))? + "\n";
        write_text(path, &text)?;
    }
    Ok(())
}
