//! Prompt rendering for the with- and without-guideline variants, and the
//! mapping from scored character spans to backend tokens.
//!
//! Offsets are byte offsets into the rendered UTF-8 string, half-open.
//! Spans are recorded while the text is written, never recovered by search,
//! so actions containing literal template markers still slice exactly.

use thiserror::Error;

use crate::model::{Guideline, Step, Trajectory};

pub const DEFAULT_TEMPLATE: &str =
    "{{instruction}}\n{{guideline}}\n{{exemplars}}\nTask: {{question}}\n{{steps}}\n";

const PLACEHOLDERS: [&str; 5] = ["instruction", "guideline", "exemplars", "question", "steps"];

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template is missing placeholder {{{{{0}}}}}")]
    MissingPlaceholder(&'static str),
    #[error("template repeats placeholder {{{{{0}}}}}")]
    RepeatedPlaceholder(&'static str),
    #[error("template has unknown placeholder {{{{{0}}}}}")]
    UnknownPlaceholder(String),
    #[error("tokens do not tile the rendered text at byte {0}")]
    NotTiled(usize),
    #[error("action span of step {0} covers no tokens")]
    EmptySpan(usize),
}

/// Which part of each step counts as the scored emission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreTarget {
    #[default]
    Action,
    /// Thought and action together, when a thought is recorded.
    Emission,
}

impl std::str::FromStr for ScoreTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "action" => Ok(Self::Action),
            "emission" => Ok(Self::Emission),
            other => Err(format!(
                "unknown score target {other:?} (expected action|emission)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(&'static str),
}

/// Parsed prompt template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    segments: Vec<Segment>,
}

impl Default for Template {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("default template is valid")
    }
}

impl Template {
    pub fn parse(source: &str) -> Result<Self, PromptError> {
        let mut segments = Vec::new();
        let mut rest = source;
        let mut seen = [false; PLACEHOLDERS.len()];
        while let Some(open) = rest.find("{{") {
            let Some(close) = rest[open..].find("}}") else {
                break;
            };
            let name = &rest[open + 2..open + close];
            let idx = PLACEHOLDERS
                .iter()
                .position(|p| *p == name)
                .ok_or_else(|| PromptError::UnknownPlaceholder(name.to_string()))?;
            if seen[idx] {
                return Err(PromptError::RepeatedPlaceholder(PLACEHOLDERS[idx]));
            }
            seen[idx] = true;
            if open > 0 {
                segments.push(Segment::Literal(rest[..open].to_string()));
            }
            segments.push(Segment::Slot(PLACEHOLDERS[idx]));
            rest = &rest[open + close + 2..];
        }
        if !rest.is_empty() {
            segments.push(Segment::Literal(rest.to_string()));
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(PromptError::MissingPlaceholder(PLACEHOLDERS[i]));
        }
        Ok(Self { segments })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionSpan {
    pub step_index: usize,
    pub char_start: usize,
    pub char_end: usize,
}

/// A rendered prompt together with the byte spans of each scored action.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub instruction: String,
    pub guideline: Option<Guideline>,
    pub exemplars: Vec<String>,
    pub rendered: String,
    pub action_spans: Vec<ActionSpan>,
}

impl PromptBundle {
    pub fn span_text(&self, span: &ActionSpan) -> &str {
        &self.rendered[span.char_start..span.char_end]
    }

    pub fn action_texts(&self) -> Vec<&str> {
        self.action_spans
            .iter()
            .map(|s| self.span_text(s))
            .collect()
    }
}

/// Shared inputs for rendering prompts.
#[derive(Debug, Clone, Copy)]
pub struct PromptParts<'a> {
    pub instruction: &'a str,
    pub guideline: Option<&'a Guideline>,
    pub exemplars: &'a [String],
    pub template: &'a Template,
    pub target: ScoreTarget,
}

struct Renderer {
    out: String,
    spans: Vec<ActionSpan>,
}

impl Renderer {
    fn push(&mut self, s: &str) {
        self.out.push_str(s);
    }

    fn step(&mut self, index: usize, step: &Step, target: ScoreTarget) {
        let mut emission_start = None;
        if let Some(thought) = &step.thought {
            self.push("Thought: ");
            emission_start = Some(self.out.len());
            self.push(thought);
            self.push("\n");
        }
        self.push("Action: ");
        let action_start = self.out.len();
        self.push(&step.action);
        let start = match target {
            ScoreTarget::Emission => emission_start.unwrap_or(action_start),
            ScoreTarget::Action => action_start,
        };
        self.spans.push(ActionSpan {
            step_index: index,
            char_start: start,
            char_end: self.out.len(),
        });
        self.push("\nObservation: ");
        self.push(&step.observation);
    }
}

fn exemplar_block(exemplars: &[String]) -> String {
    exemplars
        .iter()
        .map(|e| e.strip_suffix('\n').unwrap_or(e))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Renders the template. In generation mode the steps slot ends with an open
/// `Action: ` line and nothing after it is emitted.
fn render(
    parts: &PromptParts<'_>,
    question: &str,
    steps: &[Step],
    generation: bool,
) -> (String, Vec<ActionSpan>) {
    let mut r = Renderer {
        out: String::new(),
        spans: Vec::new(),
    };
    let segs = &parts.template.segments;
    let mut skip_newline = false;
    for (i, seg) in segs.iter().enumerate() {
        match seg {
            Segment::Literal(text) => {
                let text = if skip_newline {
                    text.strip_prefix('\n').unwrap_or(text)
                } else {
                    text
                };
                skip_newline = false;
                r.push(text);
            }
            Segment::Slot(name) => {
                skip_newline = false;
                let value = match *name {
                    "instruction" => parts
                        .instruction
                        .strip_suffix('\n')
                        .unwrap_or(parts.instruction)
                        .to_string(),
                    "guideline" => parts
                        .guideline
                        .map(|g| g.body().to_string())
                        .unwrap_or_default(),
                    "exemplars" => exemplar_block(parts.exemplars),
                    "question" => question.to_string(),
                    "steps" => {
                        for (t, step) in steps.iter().enumerate() {
                            if t > 0 {
                                r.push("\n");
                            }
                            r.step(t, step, parts.target);
                        }
                        if generation {
                            if !steps.is_empty() {
                                r.push("\n");
                            }
                            r.push("Action: ");
                            return (r.out, r.spans);
                        }
                        continue;
                    }
                    _ => unreachable!("placeholder set is closed"),
                };
                // An empty slot alone on its line removes the whole line.
                let line_start = r.out.is_empty() || r.out.ends_with('\n');
                let next_starts_line = match segs.get(i + 1) {
                    None => true,
                    Some(Segment::Literal(t)) => t.starts_with('\n'),
                    Some(Segment::Slot(_)) => false,
                };
                if value.is_empty() && line_start && next_starts_line {
                    skip_newline = true;
                } else {
                    r.push(&value);
                }
            }
        }
    }
    (r.out, r.spans)
}

/// Renders the scoring prompt for a recorded trajectory.
pub fn build_prompt(
    parts: &PromptParts<'_>,
    question: &str,
    trajectory: &Trajectory,
) -> PromptBundle {
    let (rendered, action_spans) = render(parts, question, &trajectory.steps, false);
    PromptBundle {
        instruction: parts.instruction.to_string(),
        guideline: parts.guideline.cloned(),
        exemplars: parts.exemplars.to_vec(),
        rendered,
        action_spans,
    }
}

/// Renders the prompt used to ask a generator for the next action: the
/// history so far, ending in `"Action: "`.
pub fn build_generation_prompt(
    parts: &PromptParts<'_>,
    question: &str,
    history: &[Step],
) -> String {
    render(parts, question, history, true).0
}

/// A backend token with its byte interval in the scored text.
pub trait TokenOffsets {
    fn token_text(&self) -> &str;
    fn char_start(&self) -> usize;
    fn char_end(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffsetToken {
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
}

impl TokenOffsets for OffsetToken {
    fn token_text(&self) -> &str {
        &self.text
    }
    fn char_start(&self) -> usize {
        self.char_start
    }
    fn char_end(&self) -> usize {
        self.char_end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenRange {
    pub step_index: usize,
    pub token_start: usize,
    pub token_end: usize,
}

impl TokenRange {
    pub fn len(&self) -> usize {
        self.token_end - self.token_start
    }

    pub fn is_empty(&self) -> bool {
        self.token_end == self.token_start
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSpanMap {
    pub per_action: Vec<TokenRange>,
}

/// Checks that `tokens` cover `text` contiguously and reproduce it.
pub fn check_tiling<T: TokenOffsets>(text: &str, tokens: &[T]) -> Result<(), PromptError> {
    let mut pos = 0;
    for tok in tokens {
        if tok.char_start() != pos || tok.char_end() < tok.char_start() {
            return Err(PromptError::NotTiled(pos));
        }
        if text.get(tok.char_start()..tok.char_end()) != Some(tok.token_text()) {
            return Err(PromptError::NotTiled(pos));
        }
        pos = tok.char_end();
    }
    if pos != text.len() {
        return Err(PromptError::NotTiled(pos));
    }
    Ok(())
}

/// Every token whose interval overlaps an action span belongs to that action.
pub fn map_spans_to_tokens<T: TokenOffsets>(
    bundle: &PromptBundle,
    tokens: &[T],
) -> Result<TokenSpanMap, PromptError> {
    check_tiling(&bundle.rendered, tokens)?;
    let mut per_action = Vec::with_capacity(bundle.action_spans.len());
    let mut cursor = 0;
    for span in &bundle.action_spans {
        while cursor < tokens.len() && tokens[cursor].char_end() <= span.char_start {
            cursor += 1;
        }
        let start = cursor;
        let mut end = start;
        while end < tokens.len() && tokens[end].char_start() < span.char_end {
            end += 1;
        }
        // zero-width tokens sitting exactly on the boundary do not overlap
        let start = (start..end)
            .find(|&i| tokens[i].char_end() > span.char_start)
            .unwrap_or(end);
        if start == end || span.char_start == span.char_end {
            return Err(PromptError::EmptySpan(span.step_index));
        }
        per_action.push(TokenRange {
            step_index: span.step_index,
            token_start: start,
            token_end: end,
        });
        cursor = end.saturating_sub(1).max(start);
    }
    Ok(TokenSpanMap { per_action })
}
