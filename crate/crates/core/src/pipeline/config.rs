//! Run configuration: one JSON document naming prompt files and backends.
//! Relative paths resolve against the directory of the config file. API
//! keys never appear here; HTTP backends read them from the environment.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{parse_exemplars, PipelineError, PromptContext};
use crate::backends::cache::{Cached, ResponseCache};
use crate::backends::hash_embed::{HashEmbedder, DIMENSIONS};
use crate::backends::http::{HttpBackend, HttpConfig};
use crate::backends::ngram::NgramModel;
use crate::backends::{BackendError, EchoScorer, Embedder, GenerateParams, Generator};
use crate::environments::toyshop::{ScriptedShopper, ToyShopConfig};
use crate::model::{GeSign, ModelError};
use crate::prompt::{ScoreTarget, Template};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    Http {
        endpoint: String,
        model: String,
        #[serde(default)]
        max_in_flight: Option<usize>,
        /// Retries after the first attempt (default 3).
        #[serde(default)]
        retries: Option<u32>,
        /// First backoff delay in milliseconds, doubled per retry (default 1000).
        #[serde(default)]
        retry_base_ms: Option<u64>,
    },
    Ngram {
        corpus_path: PathBuf,
        order: usize,
        #[serde(default = "yes")]
        adaptive: bool,
    },
    HashEmbed {
        #[serde(default)]
        dim: Option<usize>,
    },
    Scripted,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub instruction_path: Option<PathBuf>,
    pub guideline_path: Option<PathBuf>,
    pub exemplars_path: Option<PathBuf>,
    pub template_path: Option<PathBuf>,
    pub score_backend: Option<BackendSpec>,
    pub generate_backend: Option<BackendSpec>,
    pub embed_backend: Option<BackendSpec>,
    pub parallelism: usize,
    pub m: usize,
    pub k: usize,
    pub t_max: usize,
    pub top_k: usize,
    pub ge_sign: GeSign,
    pub score_target: ScoreTarget,
    pub generation: GenerateParams,
    pub toyshop: ToyShopConfig,
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            instruction_path: None,
            guideline_path: None,
            exemplars_path: None,
            template_path: None,
            score_backend: None,
            generate_backend: None,
            embed_backend: None,
            parallelism: 4,
            m: 30,
            k: 800,
            t_max: 15,
            top_k: 5,
            ge_sign: GeSign::default(),
            score_target: ScoreTarget::default(),
            generation: GenerateParams {
                max_tokens: 128,
                ..GenerateParams::default()
            },
            toyshop: ToyShopConfig::default(),
            cache_dir: None,
        }
    }
}

fn read(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| {
        PipelineError::Model(ModelError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = read(path)?;
        let mut config: RunConfig = serde_json::from_str(&text).map_err(|e| {
            PipelineError::Model(ModelError::Malformed {
                path: path.to_path_buf(),
                line: e.line(),
                message: e.to_string(),
            })
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve(base);
        config.check()?;
        Ok(config)
    }

    fn check(&self) -> Result<(), PipelineError> {
        if self.parallelism == 0 {
            return Err(PipelineError::Invalid(
                "parallelism must be at least 1".into(),
            ));
        }
        if self.m == 0 {
            return Err(PipelineError::Invalid("m must be at least 1".into()));
        }
        Ok(())
    }

    /// Makes every relative path relative to `base`.
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.instruction_path);
        fix(&mut self.guideline_path);
        fix(&mut self.exemplars_path);
        fix(&mut self.template_path);
        fix(&mut self.cache_dir);
        for spec in [
            &mut self.score_backend,
            &mut self.generate_backend,
            &mut self.embed_backend,
        ]
        .into_iter()
        .flatten()
        {
            if let BackendSpec::Ngram { corpus_path, .. } = spec {
                if corpus_path.is_relative() {
                    *corpus_path = base.join(&*corpus_path);
                }
            }
        }
    }

    pub fn instruction(&self) -> Result<String, PipelineError> {
        match &self.instruction_path {
            Some(p) => read(p),
            None => Ok(String::new()),
        }
    }

    pub fn prompt_context(&self) -> Result<PromptContext, PipelineError> {
        let exemplars = match &self.exemplars_path {
            Some(p) => parse_exemplars(&read(p)?),
            None => Vec::new(),
        };
        let template = match &self.template_path {
            Some(p) => {
                Template::parse(&read(p)?).map_err(|e| PipelineError::Invalid(e.to_string()))?
            }
            None => Template::default(),
        };
        Ok(PromptContext {
            instruction: self.instruction()?,
            exemplars,
            template,
            target: self.score_target,
        })
    }

    pub fn open_cache(
        &self,
        override_dir: Option<&Path>,
    ) -> Result<Option<Arc<ResponseCache>>, PipelineError> {
        let dir = override_dir
            .map(Path::to_path_buf)
            .or_else(|| self.cache_dir.clone());
        match dir {
            None => Ok(None),
            Some(dir) => ResponseCache::open(&dir)
                .map(|c| Some(Arc::new(c)))
                .map_err(|e| {
                    PipelineError::Model(ModelError::Io {
                        path: dir,
                        source: e,
                    })
                }),
        }
    }
}

fn missing(role: &str) -> PipelineError {
    PipelineError::Invalid(format!("config has no {role} backend"))
}

fn backend_err(e: BackendError) -> PipelineError {
    PipelineError::Invalid(format!("backend setup failed: {e}"))
}

fn http(spec: &BackendSpec) -> Result<HttpBackend, PipelineError> {
    let BackendSpec::Http {
        endpoint,
        model,
        max_in_flight,
        retries,
        retry_base_ms,
    } = spec
    else {
        unreachable!("called with an http spec");
    };
    let mut config = HttpConfig::new(endpoint, model);
    if let Some(n) = max_in_flight {
        config.max_in_flight = (*n).max(1);
    }
    if let Some(n) = retries {
        config.retry.retries = *n;
    }
    if let Some(ms) = retry_base_ms {
        config.retry.base_delay = std::time::Duration::from_millis(*ms);
    }
    HttpBackend::new(config).map_err(backend_err)
}

fn ngram(corpus_path: &Path, order: usize, adaptive: bool) -> Result<NgramModel, PipelineError> {
    NgramModel::train_with(&read(corpus_path)?, order, adaptive).map_err(backend_err)
}

/// Only remote backends go through the response cache.
fn cached<T: ?Sized>(inner: Arc<T>, cache: Option<Arc<ResponseCache>>) -> Option<Cached<Arc<T>>> {
    cache.map(|c| Cached::new(inner, c))
}

pub fn build_scorer(
    spec: Option<&BackendSpec>,
    cache: Option<Arc<ResponseCache>>,
) -> Result<Arc<dyn EchoScorer>, PipelineError> {
    let inner: Arc<dyn EchoScorer> = match spec.ok_or_else(|| missing("score"))? {
        spec @ BackendSpec::Http { .. } => Arc::new(http(spec)?),
        // Local and deterministic: recomputing is cheaper than a cache read.
        BackendSpec::Ngram {
            corpus_path,
            order,
            adaptive,
        } => return Ok(Arc::new(ngram(corpus_path, *order, *adaptive)?)),
        other => return Err(PipelineError::Invalid(format!("{other:?} cannot score"))),
    };
    Ok(match cached(inner.clone(), cache) {
        Some(c) => Arc::new(c),
        None => inner,
    })
}

pub fn build_generator(
    spec: Option<&BackendSpec>,
    cache: Option<Arc<ResponseCache>>,
) -> Result<Arc<dyn Generator>, PipelineError> {
    let inner: Arc<dyn Generator> = match spec.ok_or_else(|| missing("generate"))? {
        spec @ BackendSpec::Http { .. } => Arc::new(http(spec)?),
        BackendSpec::Ngram {
            corpus_path,
            order,
            adaptive,
        } => return Ok(Arc::new(ngram(corpus_path, *order, *adaptive)?)),
        BackendSpec::Scripted => return Ok(Arc::new(ScriptedShopper::default())),
        other => return Err(PipelineError::Invalid(format!("{other:?} cannot generate"))),
    };
    Ok(match cached(inner.clone(), cache) {
        Some(c) => Arc::new(c),
        None => inner,
    })
}

pub fn build_embedder(
    spec: Option<&BackendSpec>,
    cache: Option<Arc<ResponseCache>>,
) -> Result<Arc<dyn Embedder>, PipelineError> {
    match spec.unwrap_or(&BackendSpec::HashEmbed { dim: None }) {
        spec @ BackendSpec::Http { .. } => {
            let inner: Arc<dyn Embedder> = Arc::new(http(spec)?);
            Ok(match cached(inner.clone(), cache) {
                Some(c) => Arc::new(c),
                None => inner,
            })
        }
        BackendSpec::HashEmbed { dim } => {
            Ok(Arc::new(HashEmbedder::new(dim.unwrap_or(DIMENSIONS))))
        }
        other => Err(PipelineError::Invalid(format!("{other:?} cannot embed"))),
    }
}
