//! Python bindings. Reports cross the boundary as JSON text; matrices as
//! nested lists.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use shellflow::experiments::config::{ExperimentConfig, ExperimentKind};
use shellflow::experiments::report::envelope;
use shellflow::modes::ModeState;
use shellflow::operator::GramOperator;
use shellflow::transport::{CSchedule, DriftSpec};
use shellflow::Error;

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn kind_of(name: &str) -> PyResult<ExperimentKind> {
    use clap::ValueEnum;
    ExperimentKind::from_str(name, false).map_err(|_| PyValueError::new_err(format!("unknown experiment '{name}'")))
}

fn resolve(kind: &str, config: &str, seed: Option<u64>) -> PyResult<ExperimentConfig> {
    let cfg = ExperimentConfig::from_toml(config, Some(kind_of(kind)?)).map_err(py_err)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

/// Resolved configuration as JSON.
#[pyfunction]
#[pyo3(signature = (kind, config = ""))]
fn resolve_config(kind: &str, config: &str) -> PyResult<String> {
    let cfg = resolve(kind, config, None)?;
    serde_json::to_string(&cfg).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Run an experiment from TOML text; one report envelope (JSON) per unit.
/// Nothing is written to disk.
#[pyfunction]
#[pyo3(signature = (kind, config = "", seed = None))]
fn run(py: Python<'_>, kind: &str, config: &str, seed: Option<u64>) -> PyResult<Vec<String>> {
    let cfg = resolve(kind, config, seed)?;
    let units = py.detach(|| shellflow::experiments::run_experiment(&cfg)).map_err(py_err)?;
    units
        .iter()
        .map(|u| {
            let unit_cfg = match u.seed {
                Some(s) => cfg.clone().with_seed(s),
                None => cfg.clone(),
            };
            serde_json::to_string(&envelope(&unit_cfg, &u.artifacts)).map_err(|e| PyRuntimeError::new_err(e.to_string()))
        })
        .collect()
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("matrix must be square"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// `(eigenvalues descending, eigenvectors as columns)` of a symmetric PSD
/// matrix, truncated below `rank_tol·λmax`.
#[pyfunction]
#[pyo3(signature = (m, rank_tol = shellflow::operator::DEFAULT_RANK_TOL))]
fn eigensystem(m: Vec<Vec<f64>>, rank_tol: f64) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let snap = shellflow::operator::eigensystem(&GramOperator { matrix: matrix(m)?, timestamp: 0.0 }, rank_tol).map_err(py_err)?;
    let vecs = (0..snap.dim()).map(|i| snap.eigenvectors.row(i).iter().copied().collect()).collect();
    Ok((snap.eigenvalues.iter().copied().collect(), vecs))
}

/// Shell ledger for modes with the given eigenvalues and amplitudes:
/// `(alphas, energies, dissipations)`.
#[pyfunction]
fn shell_ledger(eigenvalues: Vec<f64>, amplitudes: Vec<f64>, lambda0: f64, q: f64) -> PyResult<(Vec<i64>, Vec<f64>, Vec<f64>)> {
    let r = eigenvalues.len();
    if amplitudes.len() != r {
        return Err(PyValueError::new_err("one amplitude per eigenvalue"));
    }
    let snap = shellflow::operator::eigensystem(
        &GramOperator { matrix: DMatrix::from_diagonal(&DVector::from_vec(eigenvalues)), timestamp: 0.0 },
        0.0,
    )
    .map_err(py_err)?;
    if snap.rank() != r {
        return Err(PyValueError::new_err("eigenvalues must be positive"));
    }
    // The diagonal operator's eigenvectors are a signed permutation.
    let g = DVector::from_fn(r, |u, _| {
        let (i, v) = snap.eigenvectors.column(u).iter().enumerate().find(|(_, v)| **v != 0.0).map(|(i, v)| (i, *v)).unwrap();
        v * amplitudes[i]
    });
    let ledger = shellflow::shells::build_ledger(&ModeState { timestamp: 0.0, amplitudes: g }, &snap, None, lambda0, q, None)
        .map_err(py_err)?;
    Ok((ledger.partition.alphas().collect(), ledger.energies, ledger.dissipations))
}

#[pyfunction]
fn shell_index(lambda_: f64, lambda0: f64, q: f64) -> i64 {
    shellflow::shells::shell_index(lambda_, lambda0, q)
}

/// `τ(t)` for `c(t) = c0·t^(alpha−1)`.
#[pyfunction]
#[pyo3(signature = (t, c0, alpha = 1.0))]
fn effective_time(t: f64, c0: f64, alpha: f64) -> PyResult<f64> {
    let d = DriftSpec::new(1.0, CSchedule::Power { c0, alpha }).map_err(py_err)?;
    Ok(shellflow::transport::effective_time(&d, t))
}

/// Position at effective time `tau` of the characteristic from `lambda0`;
/// `None` once it has reached the floor.
#[pyfunction]
fn characteristic(lambda0: f64, b: f64, tau: f64) -> PyResult<Option<f64>> {
    let d = DriftSpec::constant(b, 1.0).map_err(py_err)?;
    Ok(shellflow::transport::characteristic(lambda0, &d, tau).lambda())
}

#[pymodule]
#[pyo3(name = "shellflow")]
fn shellflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(eigensystem, m)?)?;
    m.add_function(wrap_pyfunction!(shell_ledger, m)?)?;
    m.add_function(wrap_pyfunction!(shell_index, m)?)?;
    m.add_function(wrap_pyfunction!(effective_time, m)?)?;
    m.add_function(wrap_pyfunction!(characteristic, m)?)?;
    Ok(())
}
