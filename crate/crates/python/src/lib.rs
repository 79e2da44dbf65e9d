//! Python bindings. Structured results come back as plain dicts and lists,
//! built from the same JSON the CLI writes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

use ppe_compliance::calibration::{self, ScoredSample};
use ppe_compliance::compliance::{self, AffinityMatrix, EmbeddingMatrix, EmbeddingRole, Step};
use ppe_compliance::evaluation::{self, MetricMode};
use ppe_compliance::pipeline::{self, synthetic, ComplianceReport, PipelineConfig};
use ppe_compliance::safety_spec;

create_exception!(ppe_compliance_py, PpeError, PyException, "Raised for any library error.");

fn err(e: ppe_compliance::Error) -> PyErr {
    PpeError::new_err(format!("{}: {e}", e.kind()))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| err(e.into()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_step(step: &str) -> PyResult<Step> {
    step.parse().map_err(err)
}

fn samples(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<Vec<ScoredSample>> {
    if scores.len() != labels.len() {
        return Err(PpeError::new_err(format!(
            "invalid-argument: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(scores.into_iter().zip(labels).map(|(s, l)| ScoredSample::new(s, l)).collect())
}

/// Decision thresholds: `delta` for step 1, `tau` for the attribute steps,
/// with optional per-step overrides.
#[pyclass(name = "Thresholds", from_py_object)]
#[derive(Clone)]
struct PyThresholds {
    inner: compliance::Thresholds,
}

#[pymethods]
impl PyThresholds {
    #[new]
    #[pyo3(signature = (delta=0.6, tau=0.6))]
    fn new(delta: f64, tau: f64) -> PyResult<Self> {
        let inner = compliance::Thresholds {
            delta,
            tau,
            ..Default::default()
        };
        inner.validate().map_err(err)?;
        Ok(PyThresholds { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: compliance::Thresholds = serde_json::from_str(text).map_err(|e| err(e.into()))?;
        inner.validate().map_err(err)?;
        Ok(PyThresholds { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| err(e.into()))
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }

    /// Threshold in effect for `step` (one of step1, do, so, io).
    fn for_step(&self, step: &str) -> PyResult<f64> {
        Ok(self.inner.for_step(parse_step(step)?))
    }

    #[pyo3(signature = (step, value=None))]
    fn set_step(&mut self, step: &str, value: Option<f64>) -> PyResult<()> {
        let mut next = self.inner;
        next.per_step.set(parse_step(step)?, value);
        next.validate().map_err(err)?;
        self.inner = next;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!("Thresholds(delta={}, tau={})", self.inner.delta, self.inner.tau)
    }
}

/// A compliance report as written by `detect`.
#[pyclass(name = "Report", from_py_object)]
#[derive(Clone)]
struct PyReport {
    inner: ComplianceReport,
}

#[pymethods]
impl PyReport {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyReport {
            inner: ComplianceReport::from_json(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyReport {
            inner: ComplianceReport::load(&path).map_err(err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    #[getter]
    fn image_ids(&self) -> Vec<String> {
        self.inner.images.iter().map(|i| i.image_id.clone()).collect()
    }

    fn status(&self, image_id: &str) -> PyResult<String> {
        let image = self
            .inner
            .image(image_id)
            .ok_or_else(|| PpeError::new_err(format!("invalid-argument: no image `{image_id}`")))?;
        Ok(serde_json::to_value(image.status).map_err(|e| err(e.into()))?.as_str().unwrap_or_default().to_owned())
    }

    fn wear_decisions<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let all: Vec<_> = self.inner.images.iter().flat_map(|i| i.wear_decisions()).collect();
        to_py(py, &all)
    }

    fn attribute_decisions<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let all: Vec<_> = self.inner.images.iter().flat_map(|i| i.attribute_decisions()).collect();
        to_py(py, &all)
    }

    fn __len__(&self) -> usize {
        self.inner.images.len()
    }
}

#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    compliance::cosine(&a, &b).map_err(err)
}

/// Cosine affinity between person rows and item rows.
#[pyfunction]
fn affinity(persons: Vec<Vec<f64>>, items: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let p = EmbeddingMatrix::from_rows(&persons, EmbeddingRole::PersonImage).map_err(err)?;
    let i = EmbeddingMatrix::from_rows(&items, EmbeddingRole::ItemText).map_err(err)?;
    let a = compliance::affinity(&p, &i).map_err(err)?;
    let (rows, cols) = a.shape();
    Ok((0..rows).map(|r| (0..cols).map(|c| a.get(r, c)).collect()).collect())
}

/// Step-1 decisions for an affinity matrix, one dict per (person, item).
#[pyfunction]
fn decide_worn<'py>(
    py: Python<'py>,
    matrix: Vec<Vec<f64>>,
    person_ids: Vec<String>,
    items: Vec<String>,
    delta: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let cols = items.len();
    if matrix.iter().any(|row| row.len() != cols) {
        return Err(PpeError::new_err("invalid-argument: every row needs one score per item"));
    }
    let flat: Vec<f64> = matrix.concat();
    let values = DMatrix::from_row_slice(matrix.len(), cols, &flat);
    let a = AffinityMatrix::new(values, person_ids, items).map_err(err)?;
    to_py(py, &compliance::decide_worn_threshold(&a, delta))
}

/// ROC points as `(threshold, tpr, fpr)`, starting from the `inf` sentinel.
#[pyfunction]
fn roc_curve(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<Vec<(f64, f64, f64)>> {
    let roc = calibration::roc_curve(&samples(scores, labels)?).map_err(err)?;
    Ok(roc.into_iter().map(|p| (p.threshold, p.tpr, p.fpr)).collect())
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    Ok(calibration::auc(&calibration::roc_curve(&samples(scores, labels)?).map_err(err)?))
}

/// `(threshold, g)` maximizing the g-means on the ROC curve.
#[pyfunction]
fn gmeans_threshold(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<(f64, f64)> {
    Ok(calibration::gmeans_threshold(&calibration::roc_curve(&samples(scores, labels)?).map_err(err)?))
}

/// Calibrate per-step thresholds. `per_step` maps a step name to
/// `(scores, labels)`.
#[pyfunction]
#[pyo3(signature = (per_step, base=None))]
fn calibrate<'py>(
    py: Python<'py>,
    per_step: BTreeMap<String, (Vec<f64>, Vec<bool>)>,
    base: Option<PyThresholds>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut sets = BTreeMap::new();
    for (step, (scores, labels)) in per_step {
        sets.insert(parse_step(&step)?, samples(scores, labels)?);
    }
    let base = base.map(|b| b.inner).unwrap_or_default();
    to_py(py, &calibration::calibrate_steps(&sets, &base))
}

#[pyfunction]
fn preprocess_answer(text: &str) -> String {
    evaluation::preprocess_answer(text)
}

#[pyfunction]
fn exact_match(prediction: &str, answer: &str) -> bool {
    evaluation::exact_match(prediction, answer)
}

#[pyfunction]
fn contains_match(prediction: &str, answer: &str) -> bool {
    evaluation::contains_match(prediction, answer)
}

#[pyfunction]
fn format_table_value(value: f64, decimals: usize) -> String {
    evaluation::format_table_value(value, decimals)
}

#[pyfunction]
fn render_items_prompt(scene: &str) -> PyResult<String> {
    safety_spec::render_items_prompt(scene).map_err(err)
}

#[pyfunction]
fn render_attributes_prompt(scene: &str, items: Vec<String>) -> PyResult<String> {
    safety_spec::render_attributes_prompt(scene, &items).map_err(err)
}

#[pyfunction]
fn parse_items_response(text: &str) -> PyResult<Vec<String>> {
    safety_spec::parse_items_response(text).map_err(err)
}

#[pyfunction]
fn parse_attributes_response<'py>(py: Python<'py>, text: &str, items: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &safety_spec::parse_attributes_response(text, &items).map_err(err)?)
}

/// Run the pipeline over a manifest. `config` is the JSON config text.
#[pyfunction]
fn run_pipeline(py: Python<'_>, manifest: PathBuf, config: &str) -> PyResult<PyReport> {
    let config = PipelineConfig::from_json(config).map_err(err)?;
    let manifest = pipeline::load_manifest(&manifest).map_err(err)?;
    let inner = py.detach(|| pipeline::run_pipeline(&manifest, &config)).map_err(err)?;
    Ok(PyReport { inner })
}

/// Score a report against an annotated manifest.
#[pyfunction]
#[pyo3(signature = (report, manifest, mode="pairs"))]
fn evaluate<'py>(py: Python<'py>, report: &PyReport, manifest: PathBuf, mode: &str) -> PyResult<Bound<'py, PyAny>> {
    let mode: MetricMode = mode.parse().map_err(err)?;
    let manifest = pipeline::load_manifest(&manifest).map_err(err)?;
    to_py(py, &pipeline::evaluate_run(&report.inner, &manifest, mode).map_err(err)?)
}

/// Write the small synthetic dataset into `dir`. Returns the manifest path
/// and a matching mock-backend config as JSON text.
#[pyfunction]
fn write_synthetic_dataset(dir: PathBuf) -> PyResult<(PathBuf, String)> {
    let manifest = synthetic::write_oracle_dataset(Path::new(&dir)).map_err(err)?;
    Ok((manifest, synthetic::oracle_config().to_json()))
}

#[pymodule]
fn ppe_compliance_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PpeError", m.py().get_type::<PpeError>())?;
    m.add("REPORT_JSON_SCHEMA", pipeline::REPORT_JSON_SCHEMA)?;
    m.add_class::<PyThresholds>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(affinity, m)?)?;
    m.add_function(wrap_pyfunction!(decide_worn, m)?)?;
    m.add_function(wrap_pyfunction!(roc_curve, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(gmeans_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess_answer, m)?)?;
    m.add_function(wrap_pyfunction!(exact_match, m)?)?;
    m.add_function(wrap_pyfunction!(contains_match, m)?)?;
    m.add_function(wrap_pyfunction!(format_table_value, m)?)?;
    m.add_function(wrap_pyfunction!(render_items_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(render_attributes_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_items_response, m)?)?;
    m.add_function(wrap_pyfunction!(parse_attributes_response, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_dataset, m)?)?;
    Ok(())
}
