//! Multi-turn environments used for annotation rollouts.

pub mod http;
pub mod replay;
pub mod toyshop;

use thiserror::Error;

use crate::model::Question;

pub const INVALID_ACTION: &str = "Invalid action.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("unknown question id {0:?}")]
    UnknownQuestion(String),
    #[error("step called after the episode ended")]
    AfterDone,
    #[error("step called before reset")]
    NotReset,
    #[error("replay expected action {expected:?}, got {got:?}")]
    ReplayMismatch { expected: String, got: String },
    #[error("environment transport failure: {0}")]
    Transport(String),
    #[error("malformed environment response: {0}")]
    InvalidResponse(String),
}

/// Feedback for one action. Reward is only nonzero on the final step.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub observation: String,
    pub reward: f64,
    pub done: bool,
}

impl EnvStep {
    pub fn running(observation: impl Into<String>) -> Self {
        Self {
            observation: observation.into(),
            reward: 0.0,
            done: false,
        }
    }

    pub fn finished(observation: impl Into<String>, reward: f64) -> Self {
        Self {
            observation: observation.into(),
            reward: reward.clamp(0.0, 1.0),
            done: true,
        }
    }
}

pub trait Environment: Send {
    /// Starts an episode and returns the task-framing observation.
    fn reset(&mut self, question: &Question) -> Result<String, EnvError>;
    fn step(&mut self, action: &str) -> Result<EnvStep, EnvError>;
}

/// Produces one fresh environment per episode.
pub trait EnvFactory: Sync {
    fn create(&self) -> Box<dyn Environment>;
}

/// Splits `name[arg]` into its parts.
pub fn parse_action(action: &str) -> Option<(&str, &str)> {
    let action = action.trim();
    let open = action.find('[')?;
    let inner = action.strip_suffix(']')?.get(open + 1..)?;
    let name = &action[..open];
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphabetic() || c == '_') {
        return None;
    }
    Some((name, inner))
}
