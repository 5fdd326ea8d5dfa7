//! Canonical record types and their line-delimited JSON encoding.
//!
//! Every file the tool reads or writes (pools, trajectories, score files,
//! selections, SFT exports, diagnostics) is JSONL: one UTF-8 record per line,
//! keys in struct declaration order, no insignificant whitespace, and a
//! trailing newline after every record. Writing a loaded canonical file
//! reproduces it byte for byte.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate question id {id:?}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("{path}:{line}: {message}")]
    Invalid {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid record: {0}")]
    Validation(String),
}

/// Records that carry their own invariants.
pub trait Validate {
    fn validate(&self) -> Result<(), String>;
}

/// One item of the unlabeled pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl Question {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    /// Difficulty level, when the pool carries one.
    pub fn level(&self) -> Option<&str> {
        self.metadata.get("level").map(String::as_str)
    }
}

impl Validate for Question {
    fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("question id is empty".into());
        }
        if self.text.is_empty() {
            return Err(format!("question {:?} has empty text", self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thought: Option<String>,
    pub action: String,
    #[serde(default)]
    pub observation: String,
}

impl Step {
    pub fn new(action: impl Into<String>, observation: impl Into<String>) -> Self {
        Self {
            thought: None,
            action: action.into(),
            observation: observation.into(),
        }
    }
}

impl Validate for Step {
    fn validate(&self) -> Result<(), String> {
        if self.action.trim().is_empty() {
            return Err("step action is empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectorySource {
    Ingested,
    Annotated,
    Synthetic,
}

/// A question followed by its (action, observation) steps and a final reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question_id: String,
    /// Question text, carried so exports do not need the pool.
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_observation: Option<String>,
    pub guideline_version: String,
    pub steps: Vec<Step>,
    pub reward: f64,
    pub source: TrajectorySource,
}

impl Trajectory {
    pub fn turns(&self) -> usize {
        self.steps.len()
    }
}

impl Validate for Trajectory {
    fn validate(&self) -> Result<(), String> {
        if self.question_id.is_empty() {
            return Err("trajectory question_id is empty".into());
        }
        if !(0.0..=1.0).contains(&self.reward) {
            return Err(format!(
                "trajectory {:?}: reward {} outside [0, 1]",
                self.question_id, self.reward
            ));
        }
        if self.steps.is_empty() {
            return Err(format!("trajectory {:?} has no steps", self.question_id));
        }
        for (i, step) in self.steps.iter().enumerate() {
            step.validate()
                .map_err(|e| format!("trajectory {:?} step {i}: {e}", self.question_id))?;
        }
        Ok(())
    }
}

/// Versioned guideline text.
///
/// The version is the first 12 hex characters of the SHA-256 of the
/// normalized body (each line right-trimmed, exactly one trailing newline),
/// so trailing-whitespace edits keep the version and any other edit changes it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Guideline {
    text: String,
    version: String,
}

impl Guideline {
    pub fn new(raw: &str) -> Self {
        let text = normalize_guideline(raw);
        let version = short_hash(text.as_bytes());
        Self { text, version }
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::new(&raw))
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    /// The body without its trailing newline, as inserted into prompts.
    pub fn body(&self) -> &str {
        self.text.strip_suffix('\n').unwrap_or(&self.text)
    }
}

pub fn normalize_guideline(raw: &str) -> String {
    let mut lines: Vec<&str> = raw.lines().map(str::trim_end).collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

/// First 12 lowercase hex characters of SHA-256.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(digest)[..12].to_string()
}

/// Sign convention for stored GE values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeSign {
    /// Positive when the guideline lowers action difficulty.
    #[default]
    Facilitation,
    /// The exact negation of `Facilitation`: positive when the guideline
    /// makes actions harder to predict.
    Hindrance,
}

impl GeSign {
    /// Converts a facilitation-signed value to this convention. The map is
    /// its own inverse.
    pub fn apply(self, value: f64) -> f64 {
        match self {
            GeSign::Facilitation => value,
            GeSign::Hindrance => -value,
        }
    }
}

impl std::str::FromStr for GeSign {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            // Legacy names kept for existing scripts.
            "facilitation" | "prose" => Ok(GeSign::Facilitation),
            "hindrance" | "eq5" => Ok(GeSign::Hindrance),
            other => Err(format!(
                "unknown ge sign convention {other:?} (expected facilitation or hindrance)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub d_i: f64,
    pub d_g: f64,
    pub n_tokens: usize,
}

impl StepScore {
    /// ln(d_i / d_g): positive when the guideline made the step easier.
    pub fn log_ratio(&self) -> f64 {
        self.d_i.ln() - self.d_g.ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub question_id: String,
    pub guideline_version: String,
    pub backend_id: String,
    pub per_step: Vec<StepScore>,
    pub ge: f64,
    #[serde(default)]
    pub ge_sign: GeSign,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_entropy: Option<f64>,
}

impl ScoreRecord {
    /// GE under the facilitation convention regardless of how it was stored.
    pub fn facilitation_ge(&self) -> f64 {
        self.ge_sign.apply(self.ge)
    }
}

impl Validate for ScoreRecord {
    fn validate(&self) -> Result<(), String> {
        if self.per_step.is_empty() {
            return Err(format!("score {:?} has no steps", self.question_id));
        }
        for s in &self.per_step {
            if !(s.d_i >= 0.0 && s.d_g >= 0.0) || s.n_tokens == 0 {
                return Err(format!("score {:?} has an invalid step", self.question_id));
            }
        }
        if !self.ge.is_finite() {
            return Err(format!("score {:?} has non-finite ge", self.question_id));
        }
        if let Some(h) = self.mean_entropy {
            if !(h >= 0.0) {
                return Err(format!("score {:?} has negative entropy", self.question_id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Ge,
    Random,
    Entropy,
    Highscore,
    Fl,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Ge,
        Strategy::Random,
        Strategy::Entropy,
        Strategy::Highscore,
        Strategy::Fl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ge => "ge",
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::Highscore => "highscore",
            Strategy::Fl => "fl",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedItem {
    pub question_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub strategy: Strategy,
    pub params: BTreeMap<String, serde_json::Value>,
    pub items: Vec<SelectedItem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl SelectionResult {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.question_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

impl Validate for SelectionResult {
    fn validate(&self) -> Result<(), String> {
        let mut seen = HashSet::new();
        for item in &self.items {
            if !seen.insert(item.question_id.as_str()) {
                return Err(format!(
                    "duplicate question id {:?} in selection",
                    item.question_id
                ));
            }
        }
        Ok(())
    }
}

/// Sidecar record for skipped or failed work items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub question_id: String,
    pub stage: String,
    pub error: String,
}

impl Validate for Diagnostic {
    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

/// Text embedding keyed by question, as produced by `embed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub question_id: String,
    pub vector: Vec<f64>,
}

impl Validate for EmbeddingRecord {
    fn validate(&self) -> Result<(), String> {
        if self.vector.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(format!(
                "embedding {:?} has non-finite entries",
                self.question_id
            ))
        }
    }
}

/// Canonical single-line encoding of one record (no trailing newline).
pub fn to_canonical_line<T: Serialize>(record: &T) -> Result<String, ModelError> {
    serde_json::to_string(record).map_err(|e| ModelError::Validation(e.to_string()))
}

pub fn write_records<T: Serialize + Validate>(
    records: &[T],
    path: &Path,
) -> Result<(), ModelError> {
    for r in records {
        r.validate().map_err(ModelError::Validation)?;
    }
    let io_err = |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = to_canonical_line(r)?;
        w.write_all(line.as_bytes()).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a JSONL file, validating each record. Blank lines are skipped.
pub fn read_records<T: DeserializeOwned + Validate>(path: &Path) -> Result<Vec<T>, ModelError> {
    Ok(read_numbered(path)?.into_iter().map(|(_, r)| r).collect())
}

fn read_numbered<T: DeserializeOwned + Validate>(
    path: &Path,
) -> Result<Vec<(usize, T)>, ModelError> {
    let io_err = |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| ModelError::Malformed {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        record.validate().map_err(|message| ModelError::Invalid {
            path: path.to_path_buf(),
            line: lineno,
            message,
        })?;
        out.push((lineno, record));
    }
    Ok(out)
}

pub fn load_pool(path: &Path) -> Result<Vec<Question>, ModelError> {
    let records: Vec<(usize, Question)> = read_numbered(path)?;
    let mut seen = HashSet::new();
    for (line, q) in &records {
        if !seen.insert(q.id.clone()) {
            return Err(ModelError::DuplicateId {
                path: path.to_path_buf(),
                line: *line,
                id: q.id.clone(),
            });
        }
    }
    Ok(records.into_iter().map(|(_, q)| q).collect())
}

pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>, ModelError> {
    read_records(path)
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreRecord>, ModelError> {
    read_records(path)
}

/// A selection file holds exactly one record.
pub fn load_selection(path: &Path) -> Result<SelectionResult, ModelError> {
    let mut records: Vec<SelectionResult> = read_records(path)?;
    match records.len() {
        1 => Ok(records.remove(0)),
        n => Err(ModelError::Malformed {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected one selection record, found {n}"),
        }),
    }
}

pub fn write_selection(selection: &SelectionResult, path: &Path) -> Result<(), ModelError> {
    write_records(std::slice::from_ref(selection), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(reward: f64, steps: usize) -> Trajectory {
        Trajectory {
            question_id: "q1".into(),
            question: "find a mug".into(),
            initial_observation: None,
            guideline_version: "000000000000".into(),
            steps: (0..steps)
                .map(|i| Step::new(format!("search[{i}]"), "ok"))
                .collect(),
            reward,
            source: TrajectorySource::Ingested,
        }
    }

    #[test]
    fn pool_loads_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pool.jsonl");
        std::fs::write(
            &p,
            "{\"id\":\"q1\",\"text\":\"a\"}\n{\"id\":\"q2\",\"text\":\"b\",\"metadata\":{\"level\":\"hard\"}}\n",
        )
        .unwrap();
        let pool = load_pool(&p).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool[0].id, "q1");
        assert_eq!(pool[1].level(), Some("hard"));
    }

    #[test]
    fn duplicate_id_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pool.jsonl");
        std::fs::write(
            &p,
            "{\"id\":\"q1\",\"text\":\"a\"}\n{\"id\":\"q2\",\"text\":\"b\"}\n{\"id\":\"q1\",\"text\":\"c\"}\n",
        )
        .unwrap();
        match load_pool(&p) {
            Err(ModelError::DuplicateId { line, id, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(id, "q1");
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pool.jsonl");
        std::fs::write(&p, "{\"id\":\"q1\",\"text\":\"a\"}\n{not json\n").unwrap();
        let err = load_pool(&p).unwrap_err();
        assert!(
            matches!(err, ModelError::Malformed { line: 2, .. }),
            "{err}"
        );
    }

    #[test]
    fn trajectory_validation() {
        assert!(traj(1.0, 3).validate().is_ok());
        assert_eq!(traj(1.0, 3).turns(), 3);
        assert!(traj(1.5, 3).validate().unwrap_err().contains("outside"));
        assert!(traj(0.5, 0).validate().unwrap_err().contains("no steps"));
        let mut t = traj(0.5, 1);
        t.steps[0].action = "  ".into();
        assert!(t.validate().is_err());
    }

    #[test]
    fn trajectory_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        let mut line = to_canonical_line(&traj(1.0, 2)).unwrap();
        line = line.replace("\"reward\":1.0", "\"reward\":1.5");
        std::fs::write(&p, format!("{line}\n")).unwrap();
        assert!(matches!(
            load_trajectories(&p),
            Err(ModelError::Invalid { line: 1, .. })
        ));
    }

    #[test]
    fn write_then_load_is_identity_and_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        let ts = vec![traj(1.0, 3), traj(0.25, 1)];
        write_records(&ts, &a).unwrap();
        let back = load_trajectories(&a).unwrap();
        assert_eq!(back, ts);
        write_records(&back, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn guideline_version_tracks_content_not_trailing_space() {
        let a = Guideline::new("Click high-ranked products first.\nBuy something.");
        let b = Guideline::new("Click high-ranked products first.   \nBuy something.\n\n\n");
        let c = Guideline::new("Click high-ranked products first.\nBuy somethin.");
        assert_eq!(a.version(), b.version());
        assert_ne!(a.version(), c.version());
        assert_eq!(a.version().len(), 12);
        assert!(a
            .version()
            .chars()
            .all(|ch| ch.is_ascii_hexdigit() && !ch.is_ascii_uppercase()));
        assert_eq!(Guideline::new(a.text()), a);
        assert_eq!(
            a.body(),
            "Click high-ranked products first.\nBuy something."
        );
    }

    #[test]
    fn selection_rejects_duplicates() {
        let sel = SelectionResult {
            strategy: Strategy::Ge,
            params: BTreeMap::new(),
            items: vec![
                SelectedItem {
                    question_id: "a".into(),
                    score: 0.0,
                },
                SelectedItem {
                    question_id: "a".into(),
                    score: 1.0,
                },
            ],
            warning: None,
        };
        assert!(sel.validate().is_err());
    }
}
