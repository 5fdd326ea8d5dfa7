//! Guideline-effectiveness data selection for multi-turn agent trajectories.
//!
//! A pool of questions is scored by contrasting how hard each recorded
//! action is to predict with and without a guideline in the prompt. The
//! lowest-scoring questions are the ones the guideline does not cover; they
//! feed guideline review and annotation. Four baseline selectors, offline
//! backends and a synthetic shopping environment round out the toolkit.

// `!(x > 0.0)` style checks are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backends;
pub mod environments;
pub mod model;
pub mod pipeline;
pub mod prompt;
pub mod scoring;
pub mod selectors;
