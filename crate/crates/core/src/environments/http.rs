//! Adapter for environments hosted behind HTTP.
//!
//! `POST {base}/reset {question_id, text}` → `{observation}` and
//! `POST {base}/step {action}` → `{observation, reward, done}`.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{EnvError, EnvFactory, EnvStep, Environment};
use crate::model::Question;

#[derive(Debug, Clone)]
pub struct HttpEnvFactory {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl HttpEnvFactory {
    pub fn new(base_url: &str) -> Result<Self, EnvError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| EnvError::Transport(e.to_string()))?;
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            client,
        })
    }
}

impl EnvFactory for HttpEnvFactory {
    fn create(&self) -> Box<dyn Environment> {
        Box::new(HttpEnv {
            base_url: self.base_url.clone(),
            client: self.client.clone(),
            done: false,
            started: false,
        })
    }
}

pub struct HttpEnv {
    base_url: String,
    client: reqwest::blocking::Client,
    done: bool,
    started: bool,
}

#[derive(Deserialize)]
struct ResetResponse {
    observation: String,
}

#[derive(Deserialize)]
struct StepResponse {
    observation: String,
    #[serde(default)]
    reward: f64,
    #[serde(default)]
    done: bool,
}

impl HttpEnv {
    fn post<T: serde::de::DeserializeOwned>(
        &self,
        route: &str,
        body: serde_json::Value,
    ) -> Result<T, EnvError> {
        let resp = self
            .client
            .post(format!("{}/{route}", self.base_url))
            .json(&body)
            .send()
            .map_err(|e| EnvError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| EnvError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(EnvError::Transport(format!("HTTP {status}: {text}")));
        }
        serde_json::from_str(&text).map_err(|e| EnvError::InvalidResponse(e.to_string()))
    }
}

impl Environment for HttpEnv {
    fn reset(&mut self, question: &Question) -> Result<String, EnvError> {
        let r: ResetResponse = self.post(
            "reset",
            json!({"question_id": question.id, "text": question.text}),
        )?;
        self.done = false;
        self.started = true;
        Ok(r.observation)
    }

    fn step(&mut self, action: &str) -> Result<EnvStep, EnvError> {
        if !self.started {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::AfterDone);
        }
        let r: StepResponse = self.post("step", json!({"action": action}))?;
        if !(0.0..=1.0).contains(&r.reward) {
            return Err(EnvError::InvalidResponse(format!(
                "reward {} outside [0, 1]",
                r.reward
            )));
        }
        if r.reward > 0.0 && !r.done {
            return Err(EnvError::InvalidResponse(
                "reward reported before episode end".into(),
            ));
        }
        self.done = r.done;
        Ok(EnvStep {
            observation: r.observation,
            reward: r.reward,
            done: r.done,
        })
    }
}
