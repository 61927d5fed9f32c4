//! Trajectory interchange format.
//!
//! A dataset is a directory holding a `manifest.toml` and one binary file per
//! trajectory. Each binary file is laid out as (little-endian):
//!
//! ```text
//! magic    b"GFTR"
//! version  u32
//! T        u32   number of steps
//! D        u32   hidden-state dimension
//! K        u32   answer-set size (0 when distributions are unavailable)
//! hidden   f32 * T * D   row-major
//! answers  f32 * T * K   row-major
//! ```
//!
//! Step texts, labels and trajectory metadata live in the manifest so the
//! binary payload stays purely numeric.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"GFTR";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
const HEADER_LEN: usize = 20;
/// Tolerance on the sum of an answer distribution.
pub const DIST_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no {MANIFEST_FILE} found in {0}")]
    MissingManifest(PathBuf),
    #[error("malformed manifest {path}: {reason}")]
    BadManifest { path: PathBuf, reason: String },
    #[error("corrupt binary for trajectory {id}: {reason}")]
    CorruptBinary { id: String, reason: String },
    #[error("dimension mismatch for trajectory {id}: {detail}")]
    DimensionMismatch { id: String, detail: String },
    #[error("trajectory {id} is invalid: {report}")]
    Invalid { id: String, report: ValidationReport },
    #[error("i/o failure at {path}: {reason}")]
    IoFailure { path: PathBuf, reason: String },
}

impl StoreError {
    fn io(path: &Path, err: impl fmt::Display) -> Self {
        StoreError::IoFailure {
            path: path.to_path_buf(),
            reason: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaithLabel {
    Faithful,
    Unfaithful,
    Uncertain,
}

impl FaithLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            FaithLabel::Faithful => "faithful",
            FaithLabel::Unfaithful => "unfaithful",
            FaithLabel::Uncertain => "uncertain",
        }
    }
}

impl fmt::Display for FaithLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Math,
    Reasoning,
    Knowledge,
    Agent,
    Synthetic,
}

impl DomainTag {
    pub const ALL: [DomainTag; 5] = [
        DomainTag::Math,
        DomainTag::Reasoning,
        DomainTag::Knowledge,
        DomainTag::Agent,
        DomainTag::Synthetic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Math => "math",
            DomainTag::Reasoning => "reasoning",
            DomainTag::Knowledge => "knowledge",
            DomainTag::Agent => "agent",
            DomainTag::Synthetic => "synthetic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.as_str() == s)
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One reasoning step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub index: usize,
    pub text: String,
    /// Last-token hidden state of the step at the recorded layer.
    pub hidden_state: Vec<f32>,
    /// Probability over the dataset's candidate answers given the prefix up to
    /// and including this step. Empty when the dataset has K = 0.
    pub answer_dist: Vec<f32>,
    pub detector_label: Option<FaithLabel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub query: String,
    pub steps: Vec<Step>,
    pub gold_answer: String,
    pub predicted_answer: String,
    pub domain_tag: DomainTag,
    pub layer_index: u32,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn label_summary(&self) -> LabelSummary {
        let mut s = LabelSummary::default();
        for step in &self.steps {
            match step.detector_label {
                Some(FaithLabel::Faithful) => s.faithful += 1,
                Some(FaithLabel::Unfaithful) => s.unfaithful += 1,
                Some(FaithLabel::Uncertain) => s.uncertain += 1,
                None => s.unlabeled += 1,
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub faithful: usize,
    pub unfaithful: usize,
    pub uncertain: usize,
    pub unlabeled: usize,
}

/// A fully decoded, validated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ambient_dim: usize,
    pub answer_set: Vec<String>,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(ambient_dim: usize, answer_set: Vec<String>) -> Self {
        Dataset {
            ambient_dim,
            answer_set,
            trajectories: Vec::new(),
        }
    }

    /// Number of candidate answers (K).
    pub fn answer_dim(&self) -> usize {
        self.answer_set.len()
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn get(&self, id: &str) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.id == id)
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub ambient_dim: usize,
    pub answer_set: Vec<String>,
    #[serde(default)]
    pub trajectories: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub byte_length: u64,
    pub steps: usize,
    pub query: String,
    pub gold_answer: String,
    pub predicted_answer: String,
    pub domain_tag: DomainTag,
    pub layer_index: u32,
    pub labels: LabelSummary,
    pub step_texts: Vec<String>,
    /// One entry per step; "" marks an unlabeled step.
    pub step_labels: Vec<String>,
}

fn label_to_str(label: Option<FaithLabel>) -> String {
    label.map(|l| l.as_str().to_string()).unwrap_or_default()
}

fn label_from_str(s: &str) -> Result<Option<FaithLabel>, String> {
    match s {
        "" => Ok(None),
        "faithful" => Ok(Some(FaithLabel::Faithful)),
        "unfaithful" => Ok(Some(FaithLabel::Unfaithful)),
        "uncertain" => Ok(Some(FaithLabel::Uncertain)),
        other => Err(format!("unknown step label {other:?}")),
    }
}

// ---------------------------------------------------------------------------
// Validation

/// A single violated invariant.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "code")]
pub enum Violation {
    EmptyTrajectory,
    IndexGap {
        position: usize,
        expected: usize,
        found: usize,
    },
    HiddenDimMismatch {
        step: usize,
        expected: usize,
        found: usize,
    },
    AnswerDimMismatch {
        step: usize,
        expected: usize,
        found: usize,
    },
    NonFiniteHidden {
        step: usize,
    },
    NegativeProbability {
        step: usize,
    },
    DistributionNotNormalized {
        step: usize,
        sum: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyTrajectory => write!(f, "EmptyTrajectory"),
            Violation::IndexGap {
                position,
                expected,
                found,
            } => {
                write!(f, "IndexGap(position={position}, expected={expected}, found={found})")
            }
            Violation::HiddenDimMismatch { step, expected, found } => {
                write!(f, "HiddenDimMismatch(step={step}, expected={expected}, found={found})")
            }
            Violation::AnswerDimMismatch { step, expected, found } => {
                write!(f, "AnswerDimMismatch(step={step}, expected={expected}, found={found})")
            }
            Violation::NonFiniteHidden { step } => write!(f, "NonFiniteHidden(step={step})"),
            Violation::NegativeProbability { step } => {
                write!(f, "NegativeProbability(step={step})")
            }
            Violation::DistributionNotNormalized { step, sum } => {
                write!(f, "DistributionNotNormalized(step={step}, sum={sum})")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

/// Checks every per-trajectory invariant. Never fails; an empty report means
/// the trajectory is well formed for ambient dimension `d` and answer-set size `k`.
pub fn validate_trajectory(t: &Trajectory, d: usize, k: usize) -> ValidationReport {
    let mut violations = Vec::new();
    if t.steps.is_empty() {
        violations.push(Violation::EmptyTrajectory);
    }
    for (position, step) in t.steps.iter().enumerate() {
        if step.index != position {
            violations.push(Violation::IndexGap {
                position,
                expected: position,
                found: step.index,
            });
        }
        let s = step.index;
        if step.hidden_state.len() != d {
            violations.push(Violation::HiddenDimMismatch {
                step: s,
                expected: d,
                found: step.hidden_state.len(),
            });
        }
        if step.hidden_state.iter().any(|v| !v.is_finite()) {
            violations.push(Violation::NonFiniteHidden { step: s });
        }
        if step.answer_dist.len() != k {
            violations.push(Violation::AnswerDimMismatch {
                step: s,
                expected: k,
                found: step.answer_dist.len(),
            });
        } else if k > 0 {
            if step.answer_dist.iter().any(|&p| p < 0.0 || p.is_nan()) {
                violations.push(Violation::NegativeProbability { step: s });
            } else {
                let sum: f64 = step.answer_dist.iter().map(|&p| p as f64).sum();
                if !((sum - 1.0).abs() <= DIST_TOLERANCE) {
                    violations.push(Violation::DistributionNotNormalized { step: s, sum });
                }
            }
        }
    }
    ValidationReport { violations }
}

// ---------------------------------------------------------------------------
// Binary codec

/// Serializes one trajectory's numeric payload.
pub fn encode_binary(t: &Trajectory, d: usize, k: usize) -> Vec<u8> {
    let steps = t.steps.len();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * steps * (d + k));
    out.extend_from_slice(&MAGIC);
    for v in [FORMAT_VERSION, steps as u32, d as u32, k as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for step in &t.steps {
        for v in &step.hidden_state {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for step in &t.steps {
        for v in &step.answer_dist {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Header of a trajectory binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinaryHeader {
    pub version: u32,
    pub steps: usize,
    pub hidden_dim: usize,
    pub answer_dim: usize,
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode_header(bytes: &[u8]) -> Result<BinaryHeader, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("file is {} bytes, shorter than the header", bytes.len()));
    }
    if bytes[..4] != MAGIC {
        return Err("bad magic".into());
    }
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    Ok(BinaryHeader {
        version,
        steps: read_u32(bytes, 8) as usize,
        hidden_dim: read_u32(bytes, 12) as usize,
        answer_dim: read_u32(bytes, 16) as usize,
    })
}

/// Decodes the payload into `(hidden rows, answer rows)`.
#[allow(clippy::type_complexity)]
pub fn decode_payload(bytes: &[u8], header: &BinaryHeader) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>), String> {
    let (t, d, k) = (header.steps, header.hidden_dim, header.answer_dim);
    let expected = HEADER_LEN + 4 * t * (d + k);
    if bytes.len() != expected {
        return Err(format!(
            "payload length {} does not match header (expected {expected})",
            bytes.len()
        ));
    }
    let floats: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    let (hidden, answers) = floats.split_at(t * d);
    let hidden = (0..t).map(|i| hidden[i * d..(i + 1) * d].to_vec()).collect();
    let answers = (0..t).map(|i| answers[i * k..(i + 1) * k].to_vec()).collect();
    Ok((hidden, answers))
}

// ---------------------------------------------------------------------------
// Dataset IO

fn binary_name(index: usize, id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{index:05}_{safe}.gftr")
}

/// Loads a dataset directory. Either every trajectory decodes and validates,
/// or an error is returned and nothing is produced.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset, StoreError> {
    let root = root.as_ref();
    let (manifest, manifest_path) = read_manifest(root)?;
    let d = manifest.ambient_dim;
    let k = manifest.answer_set.len();
    let mut seen = BTreeSet::new();
    let mut trajectories = Vec::with_capacity(manifest.trajectories.len());
    for entry in &manifest.trajectories {
        if !seen.insert(entry.id.clone()) {
            return Err(StoreError::BadManifest {
                path: manifest_path.clone(),
                reason: format!("duplicate trajectory id {}", entry.id),
            });
        }
        trajectories.push(load_entry(root, entry, d, k)?);
    }
    Ok(Dataset {
        ambient_dim: d,
        answer_set: manifest.answer_set,
        trajectories,
    })
}

/// Per-trajectory outcome of [`inspect_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub enum Inspection {
    /// The binary decoded; the report may still list violations.
    Decoded(ValidationReport),
    /// The binary could not be decoded against the manifest.
    Unreadable(String),
}

/// Decodes every manifest entry and validates it, reporting problems per
/// trajectory instead of stopping at the first one.
pub fn inspect_dataset(root: impl AsRef<Path>) -> Result<Vec<(String, Inspection)>, StoreError> {
    let root = root.as_ref();
    let (manifest, _) = read_manifest(root)?;
    let d = manifest.ambient_dim;
    let k = manifest.answer_set.len();
    Ok(manifest
        .trajectories
        .iter()
        .map(|entry| {
            let outcome = match decode_entry(root, entry, d, k) {
                Ok(t) => Inspection::Decoded(validate_trajectory(&t, d, k)),
                Err(e) => Inspection::Unreadable(e.to_string()),
            };
            (entry.id.clone(), outcome)
        })
        .collect())
}

fn read_manifest(root: &Path) -> Result<(DatasetManifest, PathBuf), StoreError> {
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(StoreError::MissingManifest(root.to_path_buf()));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| StoreError::io(&manifest_path, e))?;
    let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| StoreError::BadManifest {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.version != FORMAT_VERSION {
        return Err(StoreError::BadManifest {
            path: manifest_path,
            reason: format!("unsupported manifest version {}", manifest.version),
        });
    }
    Ok((manifest, manifest_path))
}

fn load_entry(root: &Path, entry: &ManifestEntry, d: usize, k: usize) -> Result<Trajectory, StoreError> {
    let trajectory = decode_entry(root, entry, d, k)?;
    let report = validate_trajectory(&trajectory, d, k);
    if !report.is_empty() {
        return Err(StoreError::Invalid {
            id: entry.id.clone(),
            report,
        });
    }
    Ok(trajectory)
}

fn decode_entry(root: &Path, entry: &ManifestEntry, d: usize, k: usize) -> Result<Trajectory, StoreError> {
    let corrupt = |reason: String| StoreError::CorruptBinary {
        id: entry.id.clone(),
        reason,
    };
    let path = root.join(&entry.path);
    let bytes = fs::read(&path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
    if bytes.len() as u64 != entry.byte_length {
        return Err(corrupt(format!(
            "file is {} bytes, manifest declares {}",
            bytes.len(),
            entry.byte_length
        )));
    }
    let header = decode_header(&bytes).map_err(corrupt)?;
    if header.hidden_dim != d || header.answer_dim != k || header.steps != entry.steps {
        return Err(StoreError::DimensionMismatch {
            id: entry.id.clone(),
            detail: format!(
                "manifest (T={}, D={d}, K={k}) vs binary (T={}, D={}, K={})",
                entry.steps, header.steps, header.hidden_dim, header.answer_dim
            ),
        });
    }
    if entry.step_texts.len() != entry.steps || entry.step_labels.len() != entry.steps {
        return Err(corrupt(format!(
            "manifest lists {} texts and {} labels for {} steps",
            entry.step_texts.len(),
            entry.step_labels.len(),
            entry.steps
        )));
    }
    let (hidden, answers) = decode_payload(&bytes, &header).map_err(corrupt)?;
    let mut steps = Vec::with_capacity(entry.steps);
    for (i, (h, a)) in hidden.into_iter().zip(answers).enumerate() {
        steps.push(Step {
            index: i,
            text: entry.step_texts[i].clone(),
            hidden_state: h,
            answer_dist: a,
            detector_label: label_from_str(&entry.step_labels[i]).map_err(corrupt)?,
        });
    }
    Ok(Trajectory {
        id: entry.id.clone(),
        query: entry.query.clone(),
        steps,
        gold_answer: entry.gold_answer.clone(),
        predicted_answer: entry.predicted_answer.clone(),
        domain_tag: entry.domain_tag,
        layer_index: entry.layer_index,
    })
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), StoreError> {
    let target = dir.join(name);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| StoreError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| StoreError::io(&target, e))?;
    tmp.persist(&target).map_err(|e| StoreError::io(&target, e.error))?;
    Ok(())
}

/// Writes a dataset under `root`. Binaries are written first and the manifest
/// last, each through a temporary file and rename, so a reader never sees a
/// manifest pointing at partially written payloads.
pub fn write_dataset(dataset: &Dataset, root: impl AsRef<Path>) -> Result<(), StoreError> {
    let root = root.as_ref();
    let d = dataset.ambient_dim;
    let k = dataset.answer_dim();
    for t in &dataset.trajectories {
        let report = validate_trajectory(t, d, k);
        if !report.is_empty() {
            return Err(StoreError::Invalid {
                id: t.id.clone(),
                report,
            });
        }
    }
    fs::create_dir_all(root).map_err(|e| StoreError::io(root, e))?;
    let mut entries = Vec::with_capacity(dataset.trajectories.len());
    for (i, t) in dataset.trajectories.iter().enumerate() {
        let name = binary_name(i, &t.id);
        let bytes = encode_binary(t, d, k);
        write_atomic(root, &name, &bytes)?;
        entries.push(ManifestEntry {
            id: t.id.clone(),
            path: name,
            byte_length: bytes.len() as u64,
            steps: t.len(),
            query: t.query.clone(),
            gold_answer: t.gold_answer.clone(),
            predicted_answer: t.predicted_answer.clone(),
            domain_tag: t.domain_tag,
            layer_index: t.layer_index,
            labels: t.label_summary(),
            step_texts: t.steps.iter().map(|s| s.text.clone()).collect(),
            step_labels: t.steps.iter().map(|s| label_to_str(s.detector_label)).collect(),
        });
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        ambient_dim: d,
        answer_set: dataset.answer_set.clone(),
        trajectories: entries,
    };
    let text = toml::to_string_pretty(&manifest).map_err(|e| StoreError::io(root, e))?;
    write_atomic(root, MANIFEST_FILE, text.as_bytes())
}
