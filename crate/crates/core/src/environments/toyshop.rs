//! Seeded synthetic shopping environment.
//!
//! Products carry clickable options for color, size and flavor. Attributes
//! listed in `hidden_attrs` never appear in product titles, so a shopper that
//! ranks results by title words cannot tell which product offers them. This
//! is the rule a guideline has to teach.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{parse_action, EnvError, EnvFactory, EnvStep, Environment, INVALID_ACTION};
use crate::backends::{BackendError, BackendId, BackendKind, GenerateParams, Generator};
use crate::model::Question;

pub const KINDS: &[&str] = &[
    "cookie", "tea", "coffee", "soda", "candy", "yogurt", "cereal", "chips",
];
pub const BRANDS: &[&str] = &[
    "acme", "zenith", "orchard", "nimbus", "harbor", "summit", "willow", "cobalt", "maple",
    "juniper",
];
pub const COLORS: &[&str] = &[
    "red", "blue", "green", "black", "white", "yellow", "pink", "purple",
];
pub const SIZES: &[&str] = &["small", "medium", "large", "jumbo"];
pub const FLAVORS: &[&str] = &[
    "lemon", "mint", "vanilla", "cherry", "honey", "ginger", "mango", "cocoa",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrKind {
    Color,
    Size,
    Flavor,
}

impl AttrKind {
    pub const ALL: [AttrKind; 3] = [AttrKind::Color, AttrKind::Size, AttrKind::Flavor];

    pub fn name(self) -> &'static str {
        match self {
            AttrKind::Color => "color",
            AttrKind::Size => "size",
            AttrKind::Flavor => "flavor",
        }
    }

    pub fn vocabulary(self) -> &'static [&'static str] {
        match self {
            AttrKind::Color => COLORS,
            AttrKind::Size => SIZES,
            AttrKind::Flavor => FLAVORS,
        }
    }

    /// Which attribute a word names, if any. The vocabularies are disjoint.
    pub fn of_word(word: &str) -> Option<AttrKind> {
        AttrKind::ALL
            .into_iter()
            .find(|k| k.vocabulary().contains(&word))
    }
}

impl fmt::Display for AttrKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttrKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttrKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown attribute kind {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyShopConfig {
    pub seed: u64,
    pub catalog_size: usize,
    /// Attribute kinds products carry options for.
    pub attributes: BTreeSet<AttrKind>,
    /// Attribute kinds never rendered in titles.
    pub hidden_attrs: BTreeSet<AttrKind>,
    pub max_results: usize,
    pub turn_cap: usize,
    /// Chance that a question also asks for a flavor.
    pub flavor_request_rate: f64,
}

impl Default for ToyShopConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            catalog_size: 60,
            attributes: AttrKind::ALL.into_iter().collect(),
            hidden_attrs: [AttrKind::Flavor].into_iter().collect(),
            max_results: 5,
            turn_cap: 15,
            flavor_request_rate: 0.4,
        }
    }
}

impl ToyShopConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Product {
    pub id: usize,
    pub brand: &'static str,
    pub kind: &'static str,
    pub options: BTreeMap<AttrKind, Vec<&'static str>>,
    pub title: String,
}

impl Product {
    fn page(&self) -> String {
        let mut out = format!("Product: {}\n", self.title);
        for (kind, values) in &self.options {
            let buttons: Vec<String> = values.iter().map(|v| format!("[{v}]")).collect();
            out.push_str(&format!("{kind}: {}\n", buttons.join(" ")));
        }
        out.push_str("[buy]");
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub products: Vec<Product>,
}

impl Catalog {
    /// Pure function of `config`.
    pub fn generate(config: &ToyShopConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let products = (0..config.catalog_size.max(1))
            .map(|id| {
                let brand = *BRANDS.choose(&mut rng).expect("non-empty");
                let kind = *KINDS.choose(&mut rng).expect("non-empty");
                let mut options = BTreeMap::new();
                for attr in &config.attributes {
                    let vocab = attr.vocabulary();
                    let n = rng.gen_range(1..=3.min(vocab.len()));
                    let mut values: Vec<&'static str> =
                        vocab.choose_multiple(&mut rng, n).copied().collect();
                    values.sort_by_key(|v| vocab.iter().position(|w| w == v));
                    options.insert(*attr, values);
                }
                let mut words = vec![brand, kind];
                for (attr, values) in &options {
                    if !config.hidden_attrs.contains(attr) {
                        words.extend(values.iter().copied());
                    }
                }
                Product {
                    id,
                    brand,
                    kind,
                    options,
                    title: words.join(" "),
                }
            })
            .collect();
        Self { products }
    }

    /// Titles ranked by descending word overlap with `query`, ties by id.
    /// Products sharing no word with the query are left out.
    pub fn search(&self, query: &str, max_results: usize) -> Vec<usize> {
        let query: HashSet<&str> = query.split_whitespace().collect();
        let mut hits: Vec<(usize, usize)> = self
            .products
            .iter()
            .filter_map(|p| {
                let words: HashSet<&str> = p.title.split_whitespace().collect();
                let overlap = words.intersection(&query).count();
                (overlap > 0).then_some((overlap, p.id))
            })
            .collect();
        hits.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        hits.into_iter()
            .take(max_results)
            .map(|(_, id)| id)
            .collect()
    }
}

/// What a question asks for.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Request {
    pub kind: Option<String>,
    pub attrs: BTreeMap<AttrKind, String>,
}

impl Request {
    /// Reads the request from question metadata, falling back to the words
    /// of the question text.
    pub fn of_question(question: &Question) -> Self {
        let mut req = Self::default();
        if let Some(kind) = question.metadata.get("kind").map(String::as_str) {
            req.kind = Some(kind.to_string());
            for attr in AttrKind::ALL {
                if let Some(v) = question.metadata.get(attr.name()).map(String::as_str) {
                    req.attrs.insert(attr, v.to_string());
                }
            }
            return req;
        }
        Self::of_text(&question.text)
    }

    pub fn of_text(text: &str) -> Self {
        let mut req = Self::default();
        for word in text.split(|c: char| !c.is_ascii_alphanumeric()) {
            if req.kind.is_none() && KINDS.contains(&word) {
                req.kind = Some(word.to_string());
            } else if let Some(attr) = AttrKind::of_word(word) {
                req.attrs.entry(attr).or_insert_with(|| word.to_string());
            }
        }
        req
    }

    fn total(&self) -> usize {
        self.attrs.len() + usize::from(self.kind.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub requires_hidden: bool,
}

/// Builds a shop plus a question pool over its catalog.
pub fn toyshop_make(
    config: &ToyShopConfig,
    n_questions: usize,
) -> (ToyShop, Vec<Question>, BTreeMap<String, GroundTruth>) {
    let shop = ToyShop::new(config.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut pool = Vec::with_capacity(n_questions);
    let mut truth = BTreeMap::new();
    for i in 0..n_questions {
        let product = shop
            .catalog
            .products
            .choose(&mut rng)
            .expect("catalog is never empty");
        let mut picked = BTreeMap::new();
        for attr in [AttrKind::Color, AttrKind::Size] {
            if let Some(values) = product.options.get(&attr) {
                picked.insert(attr, *values.choose(&mut rng).expect("non-empty options"));
            }
        }
        let wants_flavor = rng.gen_bool(config.flavor_request_rate.clamp(0.0, 1.0));
        if wants_flavor {
            if let Some(values) = product.options.get(&AttrKind::Flavor) {
                picked.insert(
                    AttrKind::Flavor,
                    *values.choose(&mut rng).expect("non-empty options"),
                );
            }
        }
        let requires_hidden = picked.keys().any(|a| config.hidden_attrs.contains(a));
        let id = format!("shop{}-{i:04}", config.seed);
        let mut q = Question::new(&id, question_text(product.kind, &picked, i));
        q = q.with_meta("kind", product.kind);
        for (attr, value) in &picked {
            q = q.with_meta(attr.name(), *value);
        }
        q = q.with_meta("level", if requires_hidden { "hard" } else { "easy" });
        truth.insert(id, GroundTruth { requires_hidden });
        pool.push(q);
    }
    (shop, pool, truth)
}

fn question_text(kind: &str, picked: &BTreeMap<AttrKind, &str>, i: usize) -> String {
    let color = picked.get(&AttrKind::Color).copied().unwrap_or("any");
    let size = picked.get(&AttrKind::Size).copied().unwrap_or("any");
    let mut text = match i % 3 {
        0 => format!("i need a {size} {color} {kind}"),
        1 => format!("find me a {color} {kind} in {size} size"),
        _ => format!("i am looking for a {size} {kind} that is {color}"),
    };
    if let Some(flavor) = picked.get(&AttrKind::Flavor) {
        text.push_str(&format!(" with {flavor} flavor"));
    }
    text
}

/// Shared catalog; every episode gets its own state.
#[derive(Debug, Clone)]
pub struct ToyShop {
    config: ToyShopConfig,
    catalog: Arc<Catalog>,
}

impl ToyShop {
    pub fn new(config: ToyShopConfig) -> Self {
        let catalog = Arc::new(Catalog::generate(&config));
        Self { config, catalog }
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn config(&self) -> &ToyShopConfig {
        &self.config
    }

    pub fn episode(&self) -> ToyShopEnv {
        ToyShopEnv {
            shop: self.clone(),
            request: None,
            page: Page::Start,
            turn: 0,
            done: false,
        }
    }
}

impl EnvFactory for ToyShop {
    fn create(&self) -> Box<dyn Environment> {
        Box::new(self.episode())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Page {
    Start,
    Results(Vec<usize>),
    Product {
        id: usize,
        selected: BTreeMap<AttrKind, &'static str>,
    },
}

pub struct ToyShopEnv {
    shop: ToyShop,
    request: Option<Request>,
    page: Page,
    turn: usize,
    done: bool,
}

impl ToyShopEnv {
    fn reward(&self) -> f64 {
        let (Some(req), Page::Product { id, selected }) = (&self.request, &self.page) else {
            return 0.0;
        };
        if req.total() == 0 {
            return 0.0;
        }
        let product = &self.shop.catalog.products[*id];
        let mut matched = usize::from(req.kind.as_deref() == Some(product.kind));
        matched += req
            .attrs
            .iter()
            .filter(|(attr, want)| selected.get(attr).is_some_and(|got| got == want))
            .count();
        matched as f64 / req.total() as f64
    }

    fn act(&mut self, action: &str) -> EnvStep {
        let Some((name, arg)) = parse_action(action) else {
            return EnvStep::running(INVALID_ACTION);
        };
        let arg = arg.trim();
        match name {
            "search" if !arg.is_empty() => {
                let ids = self.shop.catalog.search(arg, self.shop.config.max_results);
                let obs = if ids.is_empty() {
                    "No results.".to_string()
                } else {
                    let lines: Vec<String> = ids
                        .iter()
                        .map(|&i| format!("[{}]", self.shop.catalog.products[i].title))
                        .collect();
                    format!("Results:\n{}", lines.join("\n"))
                };
                self.page = Page::Results(ids);
                EnvStep::running(obs)
            }
            "click" if arg == "buy" => {
                let reward = self.reward();
                EnvStep::finished(
                    format!("Thank you for shopping. Your score is {reward:.2}."),
                    reward,
                )
            }
            "click" => match &mut self.page {
                Page::Results(ids) => {
                    let hit = ids
                        .iter()
                        .copied()
                        .find(|&i| self.shop.catalog.products[i].title == arg);
                    match hit {
                        Some(id) => {
                            self.page = Page::Product {
                                id,
                                selected: BTreeMap::new(),
                            };
                            EnvStep::running(self.shop.catalog.products[id].page())
                        }
                        None => EnvStep::running(INVALID_ACTION),
                    }
                }
                Page::Product { id, selected } => {
                    let product = &self.shop.catalog.products[*id];
                    let hit = product.options.iter().find_map(|(attr, values)| {
                        values.iter().find(|v| **v == arg).map(|v| (*attr, *v))
                    });
                    match hit {
                        Some((attr, value)) => {
                            selected.insert(attr, value);
                            EnvStep::running(format!("Selected {attr}: {value}."))
                        }
                        None => EnvStep::running(INVALID_ACTION),
                    }
                }
                Page::Start => EnvStep::running(INVALID_ACTION),
            },
            _ => EnvStep::running(INVALID_ACTION),
        }
    }
}

impl Environment for ToyShopEnv {
    fn reset(&mut self, question: &Question) -> Result<String, EnvError> {
        self.request = Some(Request::of_question(question));
        self.page = Page::Start;
        self.turn = 0;
        self.done = false;
        Ok(format!("Instruction: {}\n[search]", question.text))
    }

    fn step(&mut self, action: &str) -> Result<EnvStep, EnvError> {
        if self.request.is_none() {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::AfterDone);
        }
        self.turn += 1;
        let mut step = self.act(action);
        if !step.done && self.turn >= self.shop.config.turn_cap {
            step.done = true;
            step.observation.push_str("\nTurn limit reached.");
        }
        self.done = step.done;
        Ok(step)
    }
}

/// Deterministic rule-based shopper used as an offline generator.
///
/// It reads the task from the last `Task: ` line of the prompt and the
/// history from the `Action:`/`Observation:` lines after it. It knows the
/// search/click grammar but not the hidden-attribute rule: when a requested
/// attribute is absent from every result title it tries to click it as a
/// button on the results page, then settles for the top result.
#[derive(Debug, Clone)]
pub struct ScriptedShopper {
    id: BackendId,
}

impl Default for ScriptedShopper {
    fn default() -> Self {
        Self {
            id: BackendId::new(BackendKind::Scripted, "shopper-v1", "", ""),
        }
    }
}

#[derive(Debug, Default)]
struct Transcript {
    task: String,
    steps: Vec<(String, String)>,
}

fn read_transcript(prompt: &str) -> Option<Transcript> {
    let start = prompt.rfind("Task: ")?;
    let mut lines = prompt[start + "Task: ".len()..].lines();
    let mut t = Transcript {
        task: lines.next()?.to_string(),
        ..Default::default()
    };
    for line in lines {
        if let Some(action) = line.strip_prefix("Action: ") {
            t.steps.push((action.to_string(), String::new()));
        } else if let Some((_, obs)) = t.steps.last_mut() {
            let text = line.strip_prefix("Observation: ").unwrap_or(line);
            if !obs.is_empty() {
                obs.push('\n');
            }
            obs.push_str(text);
        }
    }
    // The prompt ends with an empty "Action: " for the step being generated.
    if t.steps
        .last()
        .is_some_and(|(a, o)| a.is_empty() && o.is_empty())
    {
        t.steps.pop();
    }
    Some(t)
}

fn bracketed(line: &str) -> Option<&str> {
    line.strip_prefix('[')?.strip_suffix(']')
}

impl ScriptedShopper {
    pub fn decide(&self, prompt: &str) -> String {
        let Some(t) = read_transcript(prompt) else {
            return "click[buy]".into();
        };
        let req = Request::of_text(&t.task);
        let tried: HashSet<&str> = t.steps.iter().map(|(a, _)| a.as_str()).collect();
        if t.steps.is_empty() {
            let mut words: Vec<&str> = Vec::new();
            for attr in [AttrKind::Size, AttrKind::Color] {
                if let Some(v) = req.attrs.get(&attr) {
                    words.push(v);
                }
            }
            if let Some(kind) = &req.kind {
                words.push(kind);
            }
            if let Some(v) = req.attrs.get(&AttrKind::Flavor) {
                words.push(v);
            }
            return format!("search[{}]", words.join(" "));
        }
        // The latest page that was actually displayed.
        let page = t.steps.iter().rev().map(|(_, o)| o.as_str()).find(|o| {
            o.starts_with("Results:") || o.starts_with("Product: ") || o.starts_with("No results.")
        });
        match page {
            Some(obs) if obs.starts_with("Results:") => {
                let titles: Vec<&str> = obs.lines().skip(1).filter_map(bracketed).collect();
                for value in req.attrs.values() {
                    let shown = titles
                        .iter()
                        .any(|t| t.split_whitespace().any(|w| w == value));
                    let guess = format!("click[{value}]");
                    if !shown && !tried.contains(guess.as_str()) {
                        return guess;
                    }
                }
                match titles.first() {
                    Some(title) => format!("click[{title}]"),
                    None => "click[buy]".into(),
                }
            }
            Some(obs) if obs.starts_with("Product: ") => {
                let buttons: HashSet<&str> = obs
                    .lines()
                    .flat_map(|l| l.split_whitespace())
                    .filter_map(bracketed)
                    .collect();
                for attr in AttrKind::ALL {
                    if let Some(value) = req.attrs.get(&attr) {
                        let click = format!("click[{value}]");
                        let done = t
                            .steps
                            .iter()
                            .rev()
                            .take_while(|(_, o)| !o.starts_with("Product: "))
                            .any(|(a, _)| *a == click);
                        if buttons.contains(value.as_str()) && !done {
                            return click;
                        }
                    }
                }
                "click[buy]".into()
            }
            _ => "click[buy]".into(),
        }
    }
}

impl Generator for ScriptedShopper {
    fn id(&self) -> &BackendId {
        &self.id
    }

    fn complete(&self, prompt: &str, _params: &GenerateParams) -> Result<String, BackendError> {
        Ok(self.decide(prompt))
    }
}
