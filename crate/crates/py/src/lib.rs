//! Python bindings: metrics, clustering and the end-to-end experiment runner.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use colorvar_core::clustering::{agglomerative_ward, dbscan as dbscan_core};
use colorvar_core::experiment::{run_experiment as run_core, ExperimentConfig};
use colorvar_core::metrics;
use colorvar_core::model::EmbeddingMatrix;
use colorvar_core::trainers::Method;
use colorvar_core::Matrix;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Scores for one predicted partition.
#[pyclass(name = "EvalReport", frozen, get_all)]
struct PyEvalReport {
    cgacc: f64,
    ari: f64,
    ari_raw: f64,
    fms: f64,
    cscore: f64,
    n_predicted_clusters: usize,
    n_true_groups: usize,
    no_groups_detected: bool,
}

impl From<metrics::EvalReport> for PyEvalReport {
    fn from(r: metrics::EvalReport) -> Self {
        PyEvalReport {
            cgacc: r.cgacc,
            ari: r.ari,
            ari_raw: r.ari_raw,
            fms: r.fms,
            cscore: r.cscore,
            n_predicted_clusters: r.n_predicted_clusters,
            n_true_groups: r.n_true_groups,
            no_groups_detected: r.no_groups_detected,
        }
    }
}

#[pymethods]
impl PyEvalReport {
    fn __repr__(&self) -> String {
        format!(
            "EvalReport(cgacc={:.4}, ari={:.4}, fms={:.4}, cscore={:.4}, clusters={})",
            self.cgacc, self.ari, self.fms, self.cscore, self.n_predicted_clusters
        )
    }
}

#[pyfunction]
fn ari(truth: Vec<usize>, pred: Vec<usize>) -> PyResult<f64> {
    metrics::ari(&truth, &pred).map_err(err)
}

#[pyfunction]
fn fms(truth: Vec<usize>, pred: Vec<usize>) -> PyResult<f64> {
    metrics::fms(&truth, &pred).map_err(err)
}

#[pyfunction]
fn cgacc(truth: Vec<usize>, pred: Vec<usize>) -> PyResult<f64> {
    Ok(metrics::cgacc(&truth, &pred).map_err(err)?.value)
}

#[pyfunction]
fn cscore(ari: f64, fms: f64) -> f64 {
    metrics::cscore(ari, fms)
}

/// Scores cluster labels (`-1` = noise) against group ids (`None` = ungrouped).
#[pyfunction]
fn evaluate(groups: Vec<Option<String>>, labels: Vec<i64>) -> PyResult<PyEvalReport> {
    Ok(metrics::evaluate(&groups, &labels).map_err(err)?.into())
}

fn embeddings(rows: Vec<Vec<f64>>) -> PyResult<EmbeddingMatrix> {
    let values = Matrix::from_rows(&rows).map_err(err)?;
    let ids = (0..rows.len()).map(|i| i.to_string()).collect();
    EmbeddingMatrix::new(ids, values, false).map_err(err)
}

#[pyfunction]
fn ward(rows: Vec<Vec<f64>>, threshold: f64) -> PyResult<Vec<i64>> {
    Ok(agglomerative_ward(&embeddings(rows)?, threshold).map_err(err)?.labels)
}

#[pyfunction]
#[pyo3(signature = (rows, eps, min_pts = 2))]
fn dbscan(rows: Vec<Vec<f64>>, eps: f64, min_pts: usize) -> PyResult<Vec<i64>> {
    Ok(dbscan_core(&embeddings(rows)?, eps, min_pts).map_err(err)?.labels)
}

/// Runs the full pipeline from a TOML or JSON config and returns the selected report.
#[pyfunction]
#[pyo3(signature = (config, out_dir = None, seed = None, method = None))]
fn run_experiment(
    py: Python<'_>,
    config: PathBuf,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
    method: Option<String>,
) -> PyResult<PyEvalReport> {
    let mut cfg = ExperimentConfig::load(&config).map_err(err)?;
    if let Some(m) = method {
        cfg = cfg.with_method(m.parse::<Method>().map_err(err)?);
    }
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = out_dir {
        cfg.out_dir = o;
    }
    let outcome = py.detach(|| run_core(&cfg)).map_err(err)?;
    Ok(outcome.report.report.into())
}

#[pymodule]
fn colorvar(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEvalReport>()?;
    m.add_function(wrap_pyfunction!(ari, m)?)?;
    m.add_function(wrap_pyfunction!(fms, m)?)?;
    m.add_function(wrap_pyfunction!(cgacc, m)?)?;
    m.add_function(wrap_pyfunction!(cscore, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ward, m)?)?;
    m.add_function(wrap_pyfunction!(dbscan, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
