//! Difficulty, guideline-effectiveness and entropy arithmetic.
//!
//! Everything here is pure: callers hand in token log-probabilities and get
//! back numbers. All logarithms are natural.

use thiserror::Error;

use crate::model::{GeSign, StepScore};

/// Floor applied to per-step difficulty, in nats per token.
pub const DIFFICULTY_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("empty log-probability list")]
    EmptyLogprobs,
    #[error("log-probability {0} is positive")]
    PositiveLogprob(f64),
    #[error("no steps to aggregate")]
    NoSteps,
    #[error("difficulty {0} is not positive")]
    NonPositiveDifficulty(f64),
    #[error("no token distributions")]
    NoDistributions,
    #[error("top-k probabilities sum to {0}, above 1")]
    MassAboveOne(f64),
    #[error("variant step counts differ: with guideline {with_g}, without {without_g}")]
    LengthMismatch { with_g: usize, without_g: usize },
}

/// Natural-log probabilities of the target tokens of one action.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLogprobs(Vec<f64>);

impl StepLogprobs {
    pub fn new(logprobs: Vec<f64>) -> Result<Self, ScoringError> {
        if logprobs.is_empty() {
            return Err(ScoringError::EmptyLogprobs);
        }
        if let Some(&bad) = logprobs.iter().find(|lp| !(**lp <= 0.0)) {
            return Err(ScoringError::PositiveLogprob(bad));
        }
        Ok(Self(logprobs))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Average cross-entropy of one action's tokens, floored at [`DIFFICULTY_FLOOR`].
pub fn step_difficulty(lp: &StepLogprobs) -> f64 {
    let n = lp.0.len() as f64;
    let mean_nll = -lp.0.iter().sum::<f64>() / n;
    mean_nll.max(DIFFICULTY_FLOOR)
}

/// Mean per-step log ratio ln(d_i / d_g), sign-adjusted by `sign`.
///
/// Under [`GeSign::Facilitation`] a positive value means the guideline made actions
/// easier on average.
pub fn ge_score(per_step: &[(f64, f64)], sign: GeSign) -> Result<f64, ScoringError> {
    if per_step.is_empty() {
        return Err(ScoringError::NoSteps);
    }
    let mut total = 0.0;
    for &(d_i, d_g) in per_step {
        for d in [d_i, d_g] {
            if !(d > 0.0) {
                return Err(ScoringError::NonPositiveDifficulty(d));
            }
        }
        // difference of logs keeps swap-antisymmetry exact in floating point
        total += d_i.ln() - d_g.ln();
    }
    Ok(sign.apply(total / per_step.len() as f64))
}

/// Top-k alternatives at one position plus the mass they leave uncovered.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    top: Vec<(String, f64)>,
    residual_mass: f64,
}

impl TokenDistribution {
    pub fn new(top: Vec<(String, f64)>) -> Result<Self, ScoringError> {
        if let Some(&(_, bad)) = top.iter().find(|(_, lp)| !(*lp <= 0.0)) {
            return Err(ScoringError::PositiveLogprob(bad));
        }
        let mass: f64 = top.iter().map(|(_, lp)| lp.exp()).sum();
        if mass > 1.0 + 1e-9 {
            return Err(ScoringError::MassAboveOne(mass));
        }
        Ok(Self {
            top,
            residual_mass: (1.0 - mass).max(0.0),
        })
    }

    pub fn top(&self) -> &[(String, f64)] {
        &self.top
    }

    pub fn residual_mass(&self) -> f64 {
        self.residual_mass
    }

    /// Entropy with the uncovered mass treated as one extra outcome.
    pub fn entropy(&self) -> f64 {
        let mut h = 0.0;
        for (_, lp) in &self.top {
            let p = lp.exp();
            if p > 0.0 {
                h -= p * lp;
            }
        }
        let r = self.residual_mass;
        if r > 0.0 {
            h -= r * r.ln();
        }
        h.max(0.0)
    }
}

pub fn mean_entropy(dists: &[TokenDistribution]) -> Result<f64, ScoringError> {
    if dists.is_empty() {
        return Err(ScoringError::NoDistributions);
    }
    Ok(dists.iter().map(TokenDistribution::entropy).sum::<f64>() / dists.len() as f64)
}

/// Per-step scores and GE for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryScore {
    pub per_step: Vec<StepScore>,
    pub ge: f64,
}

pub fn aggregate_trajectory(
    with_g: &[StepLogprobs],
    without_g: &[StepLogprobs],
    sign: GeSign,
) -> Result<TrajectoryScore, ScoringError> {
    if with_g.len() != without_g.len() {
        return Err(ScoringError::LengthMismatch {
            with_g: with_g.len(),
            without_g: without_g.len(),
        });
    }
    if with_g.is_empty() {
        return Err(ScoringError::NoSteps);
    }
    let per_step: Vec<StepScore> = with_g
        .iter()
        .zip(without_g)
        .map(|(g, i)| StepScore {
            d_i: step_difficulty(i),
            d_g: step_difficulty(g),
            n_tokens: g.len(),
        })
        .collect();
    let pairs: Vec<(f64, f64)> = per_step.iter().map(|s| (s.d_i, s.d_g)).collect();
    let ge = ge_score(&pairs, sign)?;
    Ok(TrajectoryScore { per_step, ge })
}
