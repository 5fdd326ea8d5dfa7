//! Chat-format SFT export.

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::model::{Guideline, Trajectory, Validate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub question_id: String,
    pub messages: Vec<Message>,
}

impl Validate for SftRecord {
    fn validate(&self) -> Result<(), String> {
        validate_sft(self)
    }
}

fn msg(role: Role, content: impl Into<String>) -> Message {
    Message {
        role,
        content: content.into(),
    }
}

/// One conversation per trajectory: system (instruction and guideline),
/// user (question and initial observation), then assistant actions and user
/// observations in turn. The final observation is dropped so the record
/// ends on the last action, giving 2T + 1 messages for T steps.
pub fn export_sft(
    trajectories: &[Trajectory],
    instruction: &str,
    guideline: &Guideline,
) -> Result<Vec<SftRecord>, PipelineError> {
    let system = [instruction.trim_end(), guideline.body().trim_end()]
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("\n\n");
    trajectories
        .iter()
        .map(|t| {
            t.validate().map_err(|e| {
                PipelineError::Invalid(format!("trajectory {}: {e}", t.question_id))
            })?;
            let mut messages = Vec::with_capacity(2 * t.steps.len() + 1);
            messages.push(msg(Role::System, system.clone()));
            let opening = match &t.initial_observation {
                Some(obs) if !obs.is_empty() => format!("{}\n\n{}", t.question, obs),
                _ => t.question.clone(),
            };
            messages.push(msg(Role::User, opening));
            for (i, step) in t.steps.iter().enumerate() {
                let content = match &step.thought {
                    Some(th) => format!("Thought: {th}\nAction: {}", step.action),
                    None => step.action.clone(),
                };
                messages.push(msg(Role::Assistant, content));
                if i + 1 < t.steps.len() {
                    messages.push(msg(Role::User, step.observation.clone()));
                }
            }
            Ok(SftRecord {
                question_id: t.question_id.clone(),
                messages,
            })
        })
        .collect()
}

/// Checks the shape: one leading system message, then user and assistant
/// strictly alternating, starting with user and ending with assistant.
pub fn validate_sft(record: &SftRecord) -> Result<(), String> {
    let (first, rest) = record.messages.split_first().ok_or("no messages")?;
    if first.role != Role::System {
        return Err("first message must be the system message".into());
    }
    if rest.is_empty() {
        return Err("no conversation after the system message".into());
    }
    for (i, m) in rest.iter().enumerate() {
        let want = if i % 2 == 0 {
            Role::User
        } else {
            Role::Assistant
        };
        if m.role != want {
            return Err(format!(
                "message {} has role {:?}, expected {want:?}",
                i + 1,
                m.role
            ));
        }
        if want == Role::Assistant && m.content.trim().is_empty() {
            return Err(format!("message {} is an empty assistant turn", i + 1));
        }
    }
    if rest.last().map(|m| m.role) != Some(Role::Assistant) {
        return Err("conversation must end with an assistant message".into());
    }
    Ok(())
}
