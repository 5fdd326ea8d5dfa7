//! Markdown review report over the lowest-GE questions.

use std::collections::HashMap;
use std::fmt::Write;

use crate::model::{ScoreRecord, Trajectory};

/// Lowest `m` questions by GE (ties by id), each with a per-step table, the
/// minimum-log-ratio steps flagged as hotspots, and the full trajectory.
/// Ordering always follows the facilitation reading, whatever sign the
/// scores were stored with.
pub fn review_report(scores: &[ScoreRecord], trajectories: &[Trajectory], m: usize) -> String {
    let mut ranked: Vec<&ScoreRecord> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        a.facilitation_ge()
            .total_cmp(&b.facilitation_ge())
            .then_with(|| a.question_id.cmp(&b.question_id))
    });
    ranked.truncate(m);
    let mut by_id: HashMap<&str, &Trajectory> = HashMap::new();
    for t in trajectories {
        by_id.entry(t.question_id.as_str()).or_insert(t);
    }

    let mut out = String::new();
    let _ = writeln!(
        out,
        "# Guideline review\n\nLowest {} of {} scored questions by GE. \
         Low GE means the guideline did little to make the recorded actions easier to predict. \
         Steps marked HOTSPOT have the smallest log-ratio in their trajectory.\n",
        ranked.len(),
        scores.len()
    );
    for (rank, rec) in ranked.iter().enumerate() {
        let _ = writeln!(out, "## {}. {}\n", rank + 1, rec.question_id);
        let _ = writeln!(out, "- GE: {:.6}", rec.ge);
        let _ = writeln!(out, "- guideline: {}", rec.guideline_version);
        let traj = by_id.get(rec.question_id.as_str());
        if let Some(t) = traj {
            let _ = writeln!(out, "- reward: {:.4}", t.reward);
            let _ = writeln!(out, "- question: {}", t.question);
        }
        let min = rec
            .per_step
            .iter()
            .map(|s| s.log_ratio())
            .fold(f64::INFINITY, f64::min);
        let _ = writeln!(out, "\n| step | action | d_i | d_g | log-ratio | flag |");
        let _ = writeln!(out, "|---:|---|---:|---:|---:|---|");
        for (i, s) in rec.per_step.iter().enumerate() {
            let action = traj
                .and_then(|t| t.steps.get(i))
                .map(|st| table_cell(&st.action))
                .unwrap_or_default();
            let ratio = s.log_ratio();
            let flag = if ratio == min { "HOTSPOT" } else { "" };
            let _ = writeln!(
                out,
                "| {} | {} | {:.6} | {:.6} | {:+.6} | {} |",
                i + 1,
                action,
                s.d_i,
                s.d_g,
                ratio,
                flag
            );
        }
        match traj {
            Some(t) => {
                let _ = writeln!(out, "\n```text");
                if let Some(obs) = &t.initial_observation {
                    let _ = writeln!(out, "{obs}");
                }
                for (i, st) in t.steps.iter().enumerate() {
                    let marker = if rec.per_step.get(i).is_some_and(|s| s.log_ratio() == min) {
                        "  <-- HOTSPOT"
                    } else {
                        ""
                    };
                    if let Some(th) = &st.thought {
                        let _ = writeln!(out, "Thought: {th}");
                    }
                    let _ = writeln!(out, "Action: {}{marker}", st.action);
                    let _ = writeln!(out, "Observation: {}", st.observation);
                }
                let _ = writeln!(out, "```\n");
            }
            None => {
                let _ = writeln!(out, "\n(trajectory not available)\n");
            }
        }
    }
    out
}

fn table_cell(text: &str) -> String {
    format!(
        "`{}`",
        text.replace('|', "\\|")
            .replace('\n', " ")
            .replace('`', "'")
    )
}
