//! Python bindings: label-privacy mechanisms, audits, models and the
//! end-to-end pipeline.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use dpdfd_core::config::ExperimentConfig;
use dpdfd_core::label_privacy::{self as lp, PrivacyBudget, ThresholdRule};
use dpdfd_core::nn::{checkpoint, parse_arch, Model};
use dpdfd_core::pipeline::{run_pipeline as run_core, PrivateStore};
use dpdfd_core::verifier::{self, AuditReport, StatisticalOptions};
use dpdfd_core::{seed, ProbVector, Tensor};

fn py_err(e: dpdfd_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn budget(eps: f64) -> PyResult<PrivacyBudget> {
    PrivacyBudget::new(eps).map_err(py_err)
}

fn probs(v: Vec<f32>) -> PyResult<ProbVector> {
    ProbVector::new(v).map_err(py_err)
}

fn rule(k: usize, threshold: Option<f32>) -> ThresholdRule {
    match threshold {
        Some(t) => ThresholdRule::with_threshold(k, t),
        None => ThresholdRule::new(k),
    }
}

/// Probability that randomized response over `k` options keeps the true one.
#[pyfunction]
fn keep_probability(eps: f64, k: usize) -> PyResult<f64> {
    Ok(budget(eps)?.keep_probability(k))
}

/// Candidate classes for a student prediction (threshold defaults to 1/(2K)).
#[pyfunction]
#[pyo3(signature = (student_probs, threshold=None))]
fn select_candidates(student_probs: Vec<f32>, threshold: Option<f32>) -> PyResult<Vec<usize>> {
    let y_s = probs(student_probs)?;
    let r = rule(y_s.len(), threshold);
    Ok(lp::select_candidates(&y_s, &r).indices().to_vec())
}

/// Exact output distribution of selective randomized response.
#[pyfunction]
#[pyo3(signature = (student_probs, teacher_probs, eps, threshold=None))]
fn mechanism_distribution(
    student_probs: Vec<f32>,
    teacher_probs: Vec<f32>,
    eps: f64,
    threshold: Option<f32>,
) -> PyResult<Vec<f64>> {
    let (y_s, y_t) = (probs(student_probs)?, probs(teacher_probs)?);
    let r = rule(y_s.len(), threshold);
    lp::mechanism_distribution(&y_s, &y_t, &r, budget(eps)?).map_err(py_err)
}

#[pyfunction]
fn classic_rr_distribution(label: usize, num_classes: usize, eps: f64) -> PyResult<Vec<f64>> {
    lp::classic_rr_distribution(label, num_classes, budget(eps)?).map_err(py_err)
}

/// One draw of selective randomized response; returns the released class.
#[pyfunction]
#[pyo3(signature = (student_probs, teacher_probs, eps, seed, threshold=None))]
fn selective_rr(
    student_probs: Vec<f32>,
    teacher_probs: Vec<f32>,
    eps: f64,
    seed: u64,
    threshold: Option<f32>,
) -> PyResult<usize> {
    let (y_s, y_t) = (probs(student_probs)?, probs(teacher_probs)?);
    let r = rule(y_s.len(), threshold);
    let mut rng = seed::rng(seed, seed::tag::LABEL, 0, 0);
    let out = lp::selective_rr(&y_s, &y_t, &r, budget(eps)?, &mut rng).map_err(py_err)?;
    Ok(out.argmax())
}

#[pyclass(get_all, frozen)]
struct Audit {
    epsilon: f64,
    candidate_size: usize,
    num_classes: usize,
    max_ratio: f64,
    epsilon_effective: f64,
    passed: bool,
    tight: bool,
}

#[pymethods]
impl Audit {
    fn __repr__(&self) -> String {
        format!(
            "Audit(eps={}, k={}, K={}, max_ratio={:.6}, passed={}, tight={})",
            self.epsilon, self.candidate_size, self.num_classes, self.max_ratio, self.passed, self.tight
        )
    }
}

impl From<AuditReport> for Audit {
    fn from(r: AuditReport) -> Self {
        Self {
            tight: r.is_tight(),
            epsilon: r.epsilon,
            candidate_size: r.candidate_size,
            num_classes: r.num_classes,
            max_ratio: r.max_ratio,
            epsilon_effective: r.epsilon_effective,
            passed: r.pass,
        }
    }
}

/// Exhaustive likelihood-ratio audit for a candidate set of size `k`.
#[pyfunction]
fn exact_audit(k: usize, num_classes: usize, eps: f64) -> PyResult<Audit> {
    verifier::exact_audit(k, num_classes, budget(eps)?).map(Audit::from).map_err(py_err)
}

/// Monte Carlo audit with the candidate set fixed by `student_probs`.
#[pyfunction]
#[pyo3(signature = (student_probs, eps, trials=10_000, seed=0))]
fn statistical_audit(student_probs: Vec<f32>, eps: f64, trials: usize, seed: u64) -> PyResult<Audit> {
    let y_s = probs(student_probs)?;
    let r = ThresholdRule::new(y_s.len());
    let opts = StatisticalOptions::new(trials, seed);
    verifier::statistical_audit_selective(&y_s, &r, budget(eps)?, &opts)
        .map(Audit::from)
        .map_err(py_err)
}

fn batch(rows: Vec<Vec<f32>>, dim: usize) -> PyResult<Tensor> {
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(PyValueError::new_err(format!("row of length {} for input dim {dim}", bad.len())));
    }
    let n = rows.len();
    Ok(Tensor::matrix(n, dim, rows.into_iter().flatten().collect()))
}

/// A feed-forward network built from an architecture string such as
/// `"dense:32,bn,relu,dense:4"`.
#[pyclass(name = "Model")]
struct PyModel(Model);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (input_dim, arch, seed=0))]
    fn new(input_dim: usize, arch: &str, seed: u64) -> PyResult<Self> {
        let specs = parse_arch(arch).map_err(py_err)?;
        Model::new(input_dim, &specs, seed).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        checkpoint::load(path.as_ref()).map(Self).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save(&self.0, path.as_ref()).map_err(py_err)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.0.output_dim()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    fn checksum(&self) -> String {
        self.0.checksum()
    }

    /// Inference-mode outputs, one row per input row.
    fn predict(&self, rows: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        let x = batch(rows, self.0.input_dim())?;
        let out = self.0.predict(&x).map_err(py_err)?;
        let cols = self.0.output_dim();
        Ok(out.data().chunks(cols).map(<[f32]>::to_vec).collect())
    }

    fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.0)
    }
}

#[pyclass(get_all, frozen)]
struct RunSummary {
    teacher_accuracy: Option<f64>,
    student_accuracy: Option<f64>,
    stage_accuracy: Vec<Option<f64>>,
    mechanism_invocations: u64,
    total_synthetic: usize,
    private_reads_during_stages: u64,
    student_checksum: String,
}

#[pymethods]
impl RunSummary {
    fn __repr__(&self) -> String {
        let acc = |a: Option<f64>| a.map_or("None".to_string(), |v| format!("{v:.4}"));
        format!(
            "RunSummary(teacher={}, student={}, samples={})",
            acc(self.teacher_accuracy),
            acc(self.student_accuracy),
            self.total_synthetic
        )
    }
}

/// Default experiment configuration as TOML text.
#[pyfunction]
fn default_config() -> PyResult<String> {
    ExperimentConfig::default().to_toml().map_err(py_err)
}

/// Runs teacher training, generator pretraining and every distillation stage
/// in memory. `config` is TOML text; omitted keys take their defaults.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn run_pipeline(py: Python<'_>, config: Option<&str>) -> PyResult<RunSummary> {
    let cfg = match config {
        Some(text) => ExperimentConfig::parse(text).map_err(py_err)?,
        None => ExperimentConfig::default(),
    };
    py.detach(|| {
        let pipe = cfg.pipeline()?;
        let (train, test) = cfg.load_data()?;
        let store = PrivateStore::new(train);
        let out = run_core(&pipe, &store, Some(&test))?;
        Ok(RunSummary {
            teacher_accuracy: out.teacher_accuracy,
            student_accuracy: out.final_accuracy(),
            stage_accuracy: out.distill.records.iter().map(|r| r.student_acc).collect(),
            mechanism_invocations: out.distill.mechanism_invocations,
            total_synthetic: out.distill.total_synthetic,
            private_reads_during_stages: out.private_reads_during_stages,
            student_checksum: out.distill.student.checksum(),
        })
    })
    .map_err(py_err)
}

/// Runs the command-line interface with `argv` (no program name) and returns
/// its exit code.
#[pyfunction]
fn cli(py: Python<'_>, argv: Vec<String>) -> i32 {
    py.detach(|| dpdfd_core::cli::run_cli(std::iter::once("dpdfd".to_string()).chain(argv)))
}

#[pymodule]
fn dpdfd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(keep_probability, m)?)?;
    m.add_function(wrap_pyfunction!(select_candidates, m)?)?;
    m.add_function(wrap_pyfunction!(mechanism_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(classic_rr_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(selective_rr, m)?)?;
    m.add_function(wrap_pyfunction!(exact_audit, m)?)?;
    m.add_function(wrap_pyfunction!(statistical_audit, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    m.add_class::<PyModel>()?;
    m.add_class::<Audit>()?;
    m.add_class::<RunSummary>()?;
    Ok(())
}
