//! Step-1 wear decisions and step-2 attribute decisions.
//!
//! Patches and prompts are embedded by an [`EmbedderBackend`], rows are
//! L2-normalised, and scores are either dot products (the person x item
//! affinity matrix) or cosine similarities (item patch vs. attribute prompt).
//! Decisions come from an inclusive threshold rule or from a language model
//! given the scores (see [`llm`]).

pub mod llm;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::detection::ImageView;
use crate::error::{Error, Result};
use crate::safety_spec::{AttributeSpec, ObservabilityClass};

pub use llm::{
    llm_decide_attributes, llm_decide_worn, parse_attribute_decision_response,
    parse_wear_decision_response, render_attribute_decision_prompt, render_wear_decision_prompt,
    DECISION_FORMAT_VERSION,
};

pub const DEFAULT_THRESHOLD: f64 = 0.6;
pub const THRESHOLD_ENGINE: &str = "threshold";

/// A decision stage: step 1, or step 2 for one observability class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Step {
    Step1,
    Do,
    So,
    Io,
}

impl Step {
    pub const ALL: [Step; 4] = [Step::Step1, Step::Do, Step::So, Step::Io];

    pub fn as_str(self) -> &'static str {
        match self {
            Step::Step1 => "step1",
            Step::Do => "do",
            Step::So => "so",
            Step::Io => "io",
        }
    }

    /// Column heading in result tables.
    pub fn title(self) -> &'static str {
        match self {
            Step::Step1 => "Step 1",
            Step::Do => "DO",
            Step::So => "SO",
            Step::Io => "IO",
        }
    }

    pub fn class(self) -> Option<ObservabilityClass> {
        match self {
            Step::Step1 => None,
            Step::Do => Some(ObservabilityClass::Do),
            Step::So => Some(ObservabilityClass::So),
            Step::Io => Some(ObservabilityClass::Io),
        }
    }
}

impl From<ObservabilityClass> for Step {
    fn from(class: ObservabilityClass) -> Self {
        match class {
            ObservabilityClass::Do => Step::Do,
            ObservabilityClass::So => Step::So,
            ObservabilityClass::Io => Step::Io,
        }
    }
}

impl std::fmt::Display for Step {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Step {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Step::ALL
            .into_iter()
            .find(|step| step.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown step `{s}` (expected step1, do, so or io)")))
    }
}

/// Per-step overrides of the global thresholds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerStepThresholds {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step1: Option<f64>,
    #[serde(default, rename = "do", skip_serializing_if = "Option::is_none")]
    pub do_: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub so: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub io: Option<f64>,
}

impl PerStepThresholds {
    pub fn get(&self, step: Step) -> Option<f64> {
        match step {
            Step::Step1 => self.step1,
            Step::Do => self.do_,
            Step::So => self.so,
            Step::Io => self.io,
        }
    }

    pub fn set(&mut self, step: Step, value: Option<f64>) {
        let slot = match step {
            Step::Step1 => &mut self.step1,
            Step::Do => &mut self.do_,
            Step::So => &mut self.so,
            Step::Io => &mut self.io,
        };
        *slot = value;
    }
}

/// `delta` for step 1, `tau` for step 2, each overridable per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    #[serde(default = "default_threshold")]
    pub delta: f64,
    #[serde(default = "default_threshold")]
    pub tau: f64,
    #[serde(default)]
    pub per_step: PerStepThresholds,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            delta: DEFAULT_THRESHOLD,
            tau: DEFAULT_THRESHOLD,
            per_step: PerStepThresholds::default(),
        }
    }
}

impl Thresholds {
    pub fn for_step(&self, step: Step) -> f64 {
        self.per_step.get(step).unwrap_or(match step {
            Step::Step1 => self.delta,
            _ => self.tau,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.delta, self.tau]
            .into_iter()
            .chain(Step::ALL.iter().filter_map(|&s| self.per_step.get(s)));
        for value in all {
            if !value.is_finite() {
                return Err(Error::Config(format!("threshold {value} is not finite")));
            }
        }
        Ok(())
    }
}

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingRole {
    PersonImage,
    ItemImage,
    ItemText,
    AttributeText,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    normalized: bool,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding has non-finite entries".into()));
        }
        let normalized = (l2_norm(&values) - 1.0).abs() <= NORM_TOLERANCE;
        Ok(EmbeddingVector { values, normalized })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `n x d` embeddings, one row per input, all rows unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: DMatrix<f64>,
    role: EmbeddingRole,
}

impl EmbeddingMatrix {
    /// Normalises every row to unit L2 norm.
    pub fn from_rows(rows: &[Vec<f64>], role: EmbeddingRole) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::InvalidArgument("no embeddings".into()));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension is zero".into()));
        }
        let mut data = DMatrix::zeros(rows.len(), dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::InvalidArgument(format!(
                    "embedding row {i} has dimension {}, expected {dim}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("embedding row {i} is not finite")));
            }
            let norm = l2_norm(row);
            if norm == 0.0 {
                return Err(Error::Numeric(format!("embedding row {i} is the zero vector")));
            }
            for (j, v) in row.iter().enumerate() {
                data[(i, j)] = v / norm;
            }
        }
        Ok(EmbeddingMatrix { data, role })
    }

    pub fn role(&self) -> EmbeddingRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> EmbeddingVector {
        EmbeddingVector {
            values: self.data.row(i).iter().copied().collect(),
            normalized: true,
        }
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }
}

/// Joint image/text embedder (CLIP-style).
pub trait EmbedderBackend: Send + Sync {
    fn id(&self) -> &str;

    fn dim(&self) -> usize;

    fn max_concurrency(&self) -> usize {
        1
    }

    fn embed_images(&self, views: &[ImageView<'_>]) -> Result<Vec<Vec<f64>>>;

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

fn checked_rows(
    backend: &dyn EmbedderBackend,
    rows: Vec<Vec<f64>>,
    expected: usize,
    role: EmbeddingRole,
) -> Result<EmbeddingMatrix> {
    if rows.len() != expected {
        return Err(Error::backend(
            backend.id(),
            format!("returned {} embeddings for {expected} inputs", rows.len()),
        ));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != backend.dim()) {
        return Err(Error::backend(
            backend.id(),
            format!("embedding of dimension {} but backend declares {}", bad.len(), backend.dim()),
        ));
    }
    EmbeddingMatrix::from_rows(&rows, role).map_err(|e| Error::backend(backend.id(), e.to_string()))
}

pub fn embed_images(
    views: &[ImageView<'_>],
    backend: &dyn EmbedderBackend,
    role: EmbeddingRole,
) -> Result<EmbeddingMatrix> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("no image patches to embed".into()));
    }
    let rows = backend.embed_images(views)?;
    checked_rows(backend, rows, views.len(), role)
}

pub fn embed_texts(
    texts: &[String],
    backend: &dyn EmbedderBackend,
    role: EmbeddingRole,
) -> Result<EmbeddingMatrix> {
    if texts.is_empty() {
        return Err(Error::InvalidArgument("no prompts to embed".into()));
    }
    let rows = backend.embed_texts(texts)?;
    checked_rows(backend, rows, texts.len(), role)
}

/// Person x item score matrix with row and column labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AffinityRecord", into = "AffinityRecord")]
pub struct AffinityMatrix {
    values: DMatrix<f64>,
    person_ids: Vec<String>,
    item_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct AffinityRecord {
    rows: Vec<String>,
    columns: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl TryFrom<AffinityRecord> for AffinityMatrix {
    type Error = Error;

    fn try_from(rec: AffinityRecord) -> Result<Self> {
        if rec.values.len() != rec.rows.len()
            || rec.values.iter().any(|r| r.len() != rec.columns.len())
        {
            return Err(Error::InvalidArgument("affinity matrix shape mismatch".into()));
        }
        let values = DMatrix::from_fn(rec.rows.len(), rec.columns.len(), |i, j| rec.values[i][j]);
        AffinityMatrix::new(values, rec.rows, rec.columns)
    }
}

impl From<AffinityMatrix> for AffinityRecord {
    fn from(m: AffinityMatrix) -> Self {
        AffinityRecord {
            values: (0..m.values.nrows())
                .map(|i| m.values.row(i).iter().copied().collect())
                .collect(),
            rows: m.person_ids,
            columns: m.item_names,
        }
    }
}

impl AffinityMatrix {
    pub fn new(values: DMatrix<f64>, person_ids: Vec<String>, item_names: Vec<String>) -> Result<Self> {
        if values.shape() != (person_ids.len(), item_names.len()) {
            return Err(Error::InvalidArgument(format!(
                "affinity values are {:?} but labels are {}x{}",
                values.shape(),
                person_ids.len(),
                item_names.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("affinity matrix has non-finite entries".into()));
        }
        Ok(AffinityMatrix {
            values,
            person_ids,
            item_names,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub fn get(&self, person: usize, item: usize) -> f64 {
        self.values[(person, item)]
    }

    pub fn person_ids(&self) -> &[String] {
        &self.person_ids
    }

    pub fn item_names(&self) -> &[String] {
        &self.item_names
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }
}

/// `A[i][j] = <person_i, item_j>`, with default labels `p0, p1, ...` and
/// `i0, i1, ...`.
pub fn affinity(persons: &EmbeddingMatrix, items: &EmbeddingMatrix) -> Result<AffinityMatrix> {
    let person_ids = (0..persons.len()).map(|i| format!("p{i}")).collect();
    let item_names = (0..items.len()).map(|j| format!("i{j}")).collect();
    affinity_labeled(persons, items, person_ids, item_names)
}

pub fn affinity_labeled(
    persons: &EmbeddingMatrix,
    items: &EmbeddingMatrix,
    person_ids: Vec<String>,
    item_names: Vec<String>,
) -> Result<AffinityMatrix> {
    if persons.dim() != items.dim() {
        return Err(Error::InvalidArgument(format!(
            "person embeddings have dimension {} but item embeddings {}",
            persons.dim(),
            items.dim()
        )));
    }
    let values = persons.as_matrix() * items.as_matrix().transpose();
    AffinityMatrix::new(values, person_ids, item_names)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WearDecision {
    pub person_id: String,
    pub item: String,
    /// The affinity entry the decision was made on.
    pub score: f64,
    pub worn: bool,
    pub engine: String,
}

/// `worn` iff the affinity entry is at least `delta`. Row-major order.
pub fn decide_worn_threshold(matrix: &AffinityMatrix, delta: f64) -> Vec<WearDecision> {
    let (rows, cols) = matrix.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let score = matrix.get(i, j);
            out.push(WearDecision {
                person_id: matrix.person_ids[i].clone(),
                item: matrix.item_names[j].clone(),
                score,
                worn: score >= delta,
                engine: THRESHOLD_ENGINE.to_owned(),
            });
        }
    }
    out
}

/// Cosine similarity, clamped to `[-1, 1]` against rounding.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Domain("cosine of non-finite vector".into()));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Similarity between one item patch and one of its attribute prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeScore {
    pub person_id: String,
    pub item: String,
    pub attribute: AttributeSpec,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDecision {
    pub person_id: String,
    pub item: String,
    pub attribute: AttributeSpec,
    pub similarity: f64,
    pub satisfied: bool,
    pub engine: String,
}

impl AttributeDecision {
    pub fn from_score(score: &AttributeScore, satisfied: bool, engine: impl Into<String>) -> Self {
        AttributeDecision {
            person_id: score.person_id.clone(),
            item: score.item.clone(),
            attribute: score.attribute.clone(),
            similarity: score.similarity,
            satisfied,
            engine: engine.into(),
        }
    }
}

/// `satisfied` iff the similarity is at least `tau`.
pub fn decide_attribute_threshold(score: &AttributeScore, tau: f64) -> AttributeDecision {
    AttributeDecision::from_score(score, score.similarity >= tau, THRESHOLD_ENGINE)
}
