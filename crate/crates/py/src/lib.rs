use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use din_core::config::ExperimentConfig;
use din_core::metrics::{self, MetricOptions, ScoreTable};
use din_core::runner;
use din_core::DinError;

fn to_py(e: DinError) -> PyErr {
    match e {
        DinError::Io(io) => PyIOError::new_err(io.to_string()),
        DinError::Config(_) | DinError::Parse { .. } | DinError::Shape { .. } | DinError::Index { .. } => {
            PyValueError::new_err(e.to_string())
        }
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn options(raw_sums: bool, raw_bwt: bool) -> MetricOptions {
    MetricOptions {
        raw_inner_sums: raw_sums,
        raw_bwt,
    }
}

/// Square matrix of per-task accuracies, row `t` measured after training task `t`.
#[pyclass(name = "AccuracyMatrix", module = "din")]
struct PyAccuracyMatrix {
    inner: metrics::AccuracyMatrix,
}

#[pymethods]
impl PyAccuracyMatrix {
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        let inner = metrics::AccuracyMatrix::from_rows(rows).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read_csv(path: PathBuf) -> PyResult<Self> {
        let inner = runner::read_matrix(&path).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        let file = std::fs::File::create(&path)?;
        self.inner.write_csv(std::io::BufWriter::new(file)).map_err(to_py)
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner.rows()
    }

    fn __getitem__(&self, idx: (usize, usize)) -> PyResult<f64> {
        let n = self.inner.size();
        if idx.0 >= n || idx.1 >= n {
            return Err(pyo3::exceptions::PyIndexError::new_err(format!("{idx:?} outside {n}x{n}")));
        }
        Ok(self.inner.get(idx.0, idx.1))
    }

    /// LS, mS, mU, mH and BWT as fractions.
    #[pyo3(signature = (raw_sums = false, raw_bwt = false))]
    fn metrics(&self, raw_sums: bool, raw_bwt: bool) -> PyResult<BTreeMap<&'static str, f64>> {
        let m = metrics::ContinualMetrics::compute(&self.inner, options(raw_sums, raw_bwt)).map_err(to_py)?;
        Ok(BTreeMap::from([("LS", m.ls), ("mS", m.ms), ("mU", m.mu), ("mH", m.mh), ("BWT", m.bwt)]))
    }

    fn __repr__(&self) -> String {
        format!("AccuracyMatrix({:?})", self.inner.rows())
    }
}

#[pyfunction]
fn last_seen(matrix: &PyAccuracyMatrix) -> PyResult<f64> {
    metrics::last_seen(&matrix.inner).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (matrix, raw_sums = false))]
fn mean_seen(matrix: &PyAccuracyMatrix, raw_sums: bool) -> PyResult<f64> {
    metrics::mean_seen(&matrix.inner, options(raw_sums, false)).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (matrix, raw_sums = false))]
fn mean_unseen(matrix: &PyAccuracyMatrix, raw_sums: bool) -> PyResult<f64> {
    metrics::mean_unseen(&matrix.inner, options(raw_sums, false)).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (matrix, raw_bwt = false))]
fn backward_transfer(matrix: &PyAccuracyMatrix, raw_bwt: bool) -> PyResult<f64> {
    metrics::backward_transfer(&matrix.inner, options(false, raw_bwt)).map_err(to_py)
}

#[pyfunction]
fn harmonic(seen: f64, unseen: f64) -> f64 {
    metrics::harmonic(seen, unseen)
}

/// Seen/unseen area of a score table; returns `(area, [(gamma, seen, unseen), ...])`.
#[pyfunction]
#[pyo3(signature = (pool, seen, scores, labels, points = 201))]
fn suauc(
    pool: Vec<usize>,
    seen: Vec<bool>,
    scores: Vec<Vec<f64>>,
    labels: Vec<usize>,
    points: usize,
) -> PyResult<(f64, Vec<(f64, f64, f64)>)> {
    let table = ScoreTable::new(pool, seen, scores, labels).map_err(to_py)?;
    let grid = metrics::default_gamma_grid(&table, points);
    let curve = metrics::suauc(&table, &grid).map_err(to_py)?;
    let pts = curve.points.iter().map(|p| (p.gamma, p.seen_acc, p.unseen_acc)).collect();
    Ok((curve.area, pts))
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    din_core::autodiff::cosine_similarity(&a, &b).map_err(to_py)
}

#[pyfunction]
fn log_softmax_nll(logits: Vec<f64>, target: usize) -> PyResult<f64> {
    din_core::autodiff::log_softmax_nll(&logits, target).map_err(to_py)
}

/// Metrics of one seed, in percent.
#[pyclass(name = "SeedReport", module = "din", get_all)]
struct PySeedReport {
    seed: u64,
    ablation: String,
    mode: String,
    completed: bool,
    metrics: BTreeMap<String, Option<f64>>,
}

#[pymethods]
impl PySeedReport {
    fn __repr__(&self) -> String {
        format!("SeedReport(seed={}, ablation={}, mode={}, metrics={:?})", self.seed, self.ablation, self.mode, self.metrics)
    }
}

impl From<&runner::SeedReport> for PySeedReport {
    fn from(r: &runner::SeedReport) -> Self {
        Self {
            seed: r.seed,
            ablation: r.ablation.clone(),
            mode: r.mode.clone(),
            completed: r.completed,
            metrics: r.values().iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

/// Loads `config`, applies `section.key=value` overrides and trains every
/// seed, writing artifacts under `out`.
#[pyfunction]
#[pyo3(signature = (config, out = None, overrides = Vec::new(), seeds = None))]
fn run_experiment(
    py: Python<'_>,
    config: PathBuf,
    out: Option<PathBuf>,
    overrides: Vec<String>,
    seeds: Option<Vec<u64>>,
) -> PyResult<Vec<PySeedReport>> {
    let mut cfg = ExperimentConfig::load(&config, &overrides).map_err(to_py)?;
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    let out = runner::resolve_out_dir(out.as_deref(), &cfg);
    let summary = py.detach(|| runner::run_experiment(&cfg, &out)).map_err(to_py)?;
    Ok(summary.reports.iter().map(PySeedReport::from).collect())
}

#[pymodule]
fn din(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAccuracyMatrix>()?;
    m.add_class::<PySeedReport>()?;
    m.add_function(wrap_pyfunction!(last_seen, m)?)?;
    m.add_function(wrap_pyfunction!(mean_seen, m)?)?;
    m.add_function(wrap_pyfunction!(mean_unseen, m)?)?;
    m.add_function(wrap_pyfunction!(backward_transfer, m)?)?;
    m.add_function(wrap_pyfunction!(harmonic, m)?)?;
    m.add_function(wrap_pyfunction!(suauc, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(log_softmax_nll, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
