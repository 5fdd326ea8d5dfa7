//! Replays recorded trajectories so ingested data can be re-run without a
//! live environment.

use std::collections::HashMap;
use std::sync::Arc;

use super::{EnvError, EnvFactory, EnvStep, Environment};
use crate::model::{Question, Trajectory};

#[derive(Debug, Clone)]
pub struct ReplayLibrary {
    by_question: Arc<HashMap<String, Trajectory>>,
}

impl ReplayLibrary {
    /// The first trajectory per question wins.
    pub fn new(trajectories: &[Trajectory]) -> Self {
        let mut by_question = HashMap::new();
        for t in trajectories {
            by_question
                .entry(t.question_id.clone())
                .or_insert_with(|| t.clone());
        }
        Self {
            by_question: Arc::new(by_question),
        }
    }
}

impl EnvFactory for ReplayLibrary {
    fn create(&self) -> Box<dyn Environment> {
        Box::new(ReplayEnv {
            library: self.clone(),
            current: None,
            turn: 0,
            done: false,
        })
    }
}

pub struct ReplayEnv {
    library: ReplayLibrary,
    current: Option<Trajectory>,
    turn: usize,
    done: bool,
}

pub fn framing(question: &Question) -> String {
    format!("Instruction: {}", question.text)
}

impl Environment for ReplayEnv {
    fn reset(&mut self, question: &Question) -> Result<String, EnvError> {
        let t = self
            .library
            .by_question
            .get(&question.id)
            .ok_or_else(|| EnvError::UnknownQuestion(question.id.clone()))?;
        self.current = Some(t.clone());
        self.turn = 0;
        self.done = false;
        Ok(t.initial_observation
            .clone()
            .unwrap_or_else(|| framing(question)))
    }

    fn step(&mut self, action: &str) -> Result<EnvStep, EnvError> {
        let t = self.current.as_ref().ok_or(EnvError::NotReset)?;
        if self.done {
            return Err(EnvError::AfterDone);
        }
        let recorded = &t.steps[self.turn];
        if recorded.action != action {
            return Err(EnvError::ReplayMismatch {
                expected: recorded.action.clone(),
                got: action.to_string(),
            });
        }
        self.turn += 1;
        if self.turn == t.steps.len() {
            self.done = true;
            Ok(EnvStep::finished(recorded.observation.clone(), t.reward))
        } else {
            Ok(EnvStep::running(recorded.observation.clone()))
        }
    }
}
