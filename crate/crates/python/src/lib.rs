//! Python bindings: corpora, vocabularies, the two-stage detector, metrics and
//! the synthetic generator. Configs are passed as keyword arguments and use
//! the same field names as the Rust structs.

use irvuln_core::corpus::{self, DEFAULT_MAX_LINES};
use irvuln_core::detector::{self, GradSuiteConfig, ModelConfig};
use irvuln_core::error::Error;
use irvuln_core::eval::{self, ConfusionCounts, ExperimentConfig};
use irvuln_core::synth::{self, SynthConfig};
use irvuln_core::vocab::{self, build_corpus_vocabulary};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFiniteLoss { .. } | Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Builds a serde config from keyword arguments; unknown names are rejected.
fn config_from<T: DeserializeOwned>(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let json = match kwargs {
        Some(d) => {
            let py = d.py();
            py.import("json")?
                .call_method1("dumps", (d,))?
                .extract::<String>()?
        }
        None => "{}".to_owned(),
    };
    serde_json::from_str(&json).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_object<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let json = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (json,))
}

#[pyclass(module = "irvuln", skip_from_py_object)]
#[derive(Clone)]
pub struct Program {
    inner: corpus::Program,
}

#[pymethods]
impl Program {
    #[new]
    #[pyo3(signature = (id, lines, label, vulnerable_lines=Vec::new()))]
    fn new(
        id: String,
        lines: Vec<String>,
        label: u8,
        vulnerable_lines: Vec<usize>,
    ) -> PyResult<Self> {
        let inner = corpus::Program::new(id, lines, label, vulnerable_lines).map_err(to_py)?;
        Ok(Program { inner })
    }

    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn lines(&self) -> Vec<String> {
        self.inner.lines.clone()
    }

    #[getter]
    fn label(&self) -> u8 {
        self.inner.label
    }

    #[getter]
    fn vulnerable_lines(&self) -> Vec<usize> {
        self.inner.vulnerable_lines.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Program(id={:?}, lines={}, label={})",
            self.inner.id,
            self.inner.len(),
            self.inner.label
        )
    }
}

#[pyclass(module = "irvuln", skip_from_py_object)]
#[derive(Clone)]
pub struct Corpus {
    inner: corpus::Corpus,
}

#[pymethods]
impl Corpus {
    #[new]
    #[pyo3(signature = (programs, provenance="python"))]
    fn new(programs: Vec<PyRef<'_, Program>>, provenance: &str) -> PyResult<Self> {
        let programs = programs.iter().map(|p| p.inner.clone()).collect();
        let inner = corpus::Corpus::new(programs, provenance).map_err(to_py)?;
        Ok(Corpus { inner })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        let inner = corpus::load_corpus(path).map_err(to_py)?;
        Ok(Corpus { inner })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.write_jsonl(path).map_err(to_py)
    }

    fn to_jsonl(&self) -> String {
        self.inner.to_jsonl()
    }

    /// Elides user functions and drops programs of `max_lines` lines or more.
    /// Returns the prepared corpus and a dict of counts.
    #[pyo3(signature = (max_lines=DEFAULT_MAX_LINES))]
    fn prepare<'py>(
        &self,
        py: Python<'py>,
        max_lines: usize,
    ) -> PyResult<(Corpus, Bound<'py, PyDict>)> {
        let (inner, stats) = corpus::prepare_corpus(&self.inner, max_lines).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("lines_stripped", stats.lines_stripped)?;
        d.set_item("dropped_lost_labels", stats.dropped_lost_labels)?;
        d.set_item("dropped_empty", stats.dropped_empty)?;
        d.set_item("dropped_too_long", stats.dropped_too_long)?;
        d.set_item("vulnerable_lines_removed", stats.vulnerable_lines_removed)?;
        Ok((Corpus { inner }, d))
    }

    #[getter]
    fn programs(&self) -> Vec<Program> {
        self.inner
            .programs
            .iter()
            .map(|p| Program { inner: p.clone() })
            .collect()
    }

    #[getter]
    fn vulnerable_count(&self) -> usize {
        self.inner.vulnerable_count()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Corpus(programs={}, vulnerable={})",
            self.inner.len(),
            self.inner.vulnerable_count()
        )
    }
}

#[pyclass(module = "irvuln", skip_from_py_object)]
#[derive(Clone)]
pub struct Vocabulary {
    inner: vocab::Vocabulary,
}

#[pymethods]
impl Vocabulary {
    #[new]
    fn new(tokens: Vec<String>) -> PyResult<Self> {
        let inner = vocab::Vocabulary::from_tokens(tokens).map_err(to_py)?;
        Ok(Vocabulary { inner })
    }

    #[staticmethod]
    fn build(corpus: PyRef<'_, Corpus>) -> PyResult<Self> {
        let inner = build_corpus_vocabulary(&corpus.inner).map_err(to_py)?;
        Ok(Vocabulary { inner })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        let inner = vocab::Vocabulary::load(path).map_err(to_py)?;
        Ok(Vocabulary { inner })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().to_vec()
    }

    #[getter]
    fn digest(&self) -> String {
        self.inner.digest_hex()
    }

    /// Indices of the tokens present in `line`; out-of-vocabulary tokens are ignored.
    fn vectorize(&self, line: &str) -> Vec<usize> {
        vocab::vectorize_line(&self.inner, line)
            .on_indices()
            .to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(module = "irvuln", skip_from_py_object)]
pub struct Detector {
    inner: detector::Detector,
    losses: Option<(Vec<f64>, Vec<f64>)>,
}

#[pymethods]
impl Detector {
    /// Trains both stages. Keyword arguments override model defaults,
    /// e.g. `hidden_dim=16, stage1_epochs=5`.
    #[staticmethod]
    #[pyo3(signature = (corpus, vocabulary=None, **config))]
    fn train(
        py: Python<'_>,
        corpus: PyRef<'_, Corpus>,
        vocabulary: Option<PyRef<'_, Vocabulary>>,
        config: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Self> {
        let config: ModelConfig = config_from(config)?;
        let vocab = match vocabulary {
            Some(v) => v.inner.clone(),
            None => build_corpus_vocabulary(&corpus.inner).map_err(to_py)?,
        };
        let data = corpus.inner.clone();
        let (inner, report) = py
            .detach(move || detector::Detector::train(&data, vocab, config))
            .map_err(to_py)?;
        let losses = Some((report.stage1.epoch_losses, report.stage2.epoch_losses));
        Ok(Detector { inner, losses })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        let inner = detector::load_model(path).map_err(to_py)?;
        Ok(Detector {
            inner,
            losses: None,
        })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        let d = &self.inner;
        detector::save_model(&d.stage1, &d.stage2, &d.vocab, &d.config, path).map_err(to_py)
    }

    /// Per-epoch mean losses of (stage 1, stage 2); None for a loaded model.
    #[getter]
    fn losses(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        self.losses.clone()
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, &self.inner.config)
    }

    #[getter]
    fn vocabulary(&self) -> Vocabulary {
        Vocabulary {
            inner: self.inner.vocab.clone(),
        }
    }

    fn predict<'py>(
        &self,
        py: Python<'py>,
        program: PyRef<'_, Program>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let p = self.inner.predict(&program.inner).map_err(to_py)?;
        to_object(py, &p)
    }

    fn predict_corpus<'py>(
        &self,
        py: Python<'py>,
        corpus: PyRef<'_, Corpus>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let programs = corpus.inner.programs.clone();
        let preds = py
            .detach(|| self.inner.predict_all(&programs))
            .map_err(to_py)?;
        to_object(py, &preds)
    }

    /// Code-level and line-level metrics on `corpus`.
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        corpus: PyRef<'_, Corpus>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let data = corpus.inner.clone();
        let counts = py
            .detach(|| eval::evaluate_detector(&self.inner, &data))
            .map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("code", to_object(py, &eval::metrics(counts.code))?)?;
        d.set_item("line", to_object(py, &eval::metrics(counts.line))?)?;
        d.set_item("counts", to_object(py, &counts)?)?;
        Ok(d.into_any())
    }
}

/// Generates a labelled synthetic corpus. Keyword arguments override
/// generator defaults, e.g. `program_count=200, seed=3`.
#[pyfunction]
#[pyo3(signature = (**config))]
fn generate_synthetic(config: Option<&Bound<'_, PyDict>>) -> PyResult<Corpus> {
    let config: SynthConfig = config_from(config)?;
    let inner = synth::generate_corpus(&config).map_err(to_py)?;
    Ok(Corpus { inner })
}

/// Accuracy, precision, recall, F1, FPR and FNR from confusion counts.
#[pyfunction]
#[pyo3(name = "metrics")]
fn metrics_py(py: Python<'_>, tp: u64, fp: u64, fn_: u64, tn: u64) -> PyResult<Bound<'_, PyAny>> {
    to_object(py, &eval::metrics(ConfusionCounts { tp, fp, fn_, tn }))
}

/// Repeated train/test experiment. Returns `(report, csv_text)`.
#[pyfunction]
#[pyo3(signature = (corpus, repeats=5, test_fraction=0.2, vocab_scope="train", jobs=1, **model))]
fn run_experiment<'py>(
    py: Python<'py>,
    corpus: PyRef<'_, Corpus>,
    repeats: usize,
    test_fraction: f64,
    vocab_scope: &str,
    jobs: usize,
    model: Option<&Bound<'_, PyDict>>,
) -> PyResult<(Bound<'py, PyAny>, String)> {
    let cfg = ExperimentConfig {
        model: config_from(model)?,
        repeats,
        test_fraction,
        vocab_scope: serde_json::from_value(serde_json::Value::String(vocab_scope.into()))
            .map_err(|_| PyValueError::new_err(format!("unknown vocab scope {vocab_scope:?}")))?,
        jobs,
    };
    let data = corpus.inner.clone();
    let report = py
        .detach(|| eval::run_experiment(&data, &cfg))
        .map_err(to_py)?;
    Ok((to_object(py, &report)?, report.to_csv()))
}

/// Finite-difference check of both stages' analytic gradients.
#[pyfunction]
#[pyo3(signature = (seed=1, programs=3, min_coordinates=200, step=1e-5, threshold=1e-4, stacked=true))]
fn grad_check(
    py: Python<'_>,
    seed: u64,
    programs: usize,
    min_coordinates: usize,
    step: f64,
    threshold: f64,
    stacked: bool,
) -> PyResult<Bound<'_, PyAny>> {
    let cfg = GradSuiteConfig {
        seed,
        programs,
        min_coordinates,
        step,
        threshold,
        include_stacked: stacked,
        ..GradSuiteConfig::default()
    };
    let report = py
        .detach(|| detector::run_gradient_suite(&cfg))
        .map_err(to_py)?;
    let out = to_object(py, &report)?;
    out.set_item("passed", report.passed())?;
    out.set_item("max_relative_error", report.max_relative_error())?;
    Ok(out)
}

#[pymodule]
pub fn irvuln(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Program>()?;
    m.add_class::<Corpus>()?;
    m.add_class::<Vocabulary>()?;
    m.add_class::<Detector>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_py, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add("DEFAULT_MAX_LINES", DEFAULT_MAX_LINES)?;
    Ok(())
}
