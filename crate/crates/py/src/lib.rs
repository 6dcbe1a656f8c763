use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use bdsde_core::harness::{self, ExperimentConfig, RunRecord};
use bdsde_core::oracles::{bsb_closed_form, TerminalFn};
use bdsde_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(m) | Error::InvalidArgument(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn record_dict<'py>(py: Python<'py>, r: &RunRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("config_hash", &r.config_hash)?;
    d.set_item("problem", &r.problem)?;
    d.set_item("backend", r.backend.name())?;
    d.set_item("n_steps", r.n_steps)?;
    d.set_item("dt", r.dt)?;
    d.set_item("passed", r.passed())?;
    d.set_item("wall_time", r.wall_time)?;
    let rows = PyList::empty(py);
    for q in &r.results {
        let row = PyDict::new(py);
        row.set_item("quantity", &q.quantity)?;
        row.set_item("value", q.value)?;
        row.set_item("oracle", q.oracle)?;
        row.set_item("abs_error", q.abs_error)?;
        row.set_item("tolerance", q.tolerance)?;
        rows.append(row)?;
    }
    d.set_item("results", rows)?;
    Ok(d)
}

/// Run an experiment described by a TOML string.
#[pyfunction]
fn run<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = ExperimentConfig::from_toml_str(config).map_err(py_err)?;
    let record = py.detach(|| harness::run(&cfg)).map_err(py_err)?;
    record_dict(py, &record)
}

/// Convergence study; returns the rows and the fitted order.
#[pyfunction]
#[pyo3(signature = (config, halvings = 3))]
fn study<'py>(py: Python<'py>, config: &str, halvings: usize) -> PyResult<Bound<'py, PyDict>> {
    let cfg = ExperimentConfig::from_toml_str(config).map_err(py_err)?;
    let table = py.detach(|| harness::convergence_study(&cfg, halvings)).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("quantity", &table.quantity)?;
    d.set_item("fitted_order", table.fitted_order)?;
    let rows = PyList::empty(py);
    for r in &table.rows {
        rows.append((r.n_steps, r.dt, r.value, r.abs_error))?;
    }
    d.set_item("rows", rows)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (name, seed = 0))]
fn property_suite<'py>(py: Python<'py>, name: &str, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let r = py.detach(|| harness::property_suite(name, seed)).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("suite", &r.suite)?;
    d.set_item("instances", r.instances)?;
    d.set_item("violations", r.violations)?;
    d.set_item("max_violation", r.max_violation)?;
    d.set_item("failing_instance", r.failing_instance.as_deref())?;
    d.set_item("passed", r.passed())?;
    Ok(d)
}

/// Names of the registered problems.
#[pyfunction]
fn list_problems() -> Vec<&'static str> {
    harness::registry().iter().map(|p| p.name).collect()
}

/// Closed-form value of the Black-Scholes-Barenblatt problem with
/// polynomial terminal data `Σ c_k x^k` (degree ≤ 4).
#[pyfunction]
fn bsb_value(coefficients: Vec<f64>, a_low: f64, a_high: f64, tau: f64, x: f64) -> PyResult<f64> {
    bsb_closed_form(&TerminalFn::Polynomial(coefficients), a_low, a_high, tau, x).map_err(py_err)
}

#[pymodule]
fn bdsde(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(study, m)?)?;
    m.add_function(wrap_pyfunction!(property_suite, m)?)?;
    m.add_function(wrap_pyfunction!(list_problems, m)?)?;
    m.add_function(wrap_pyfunction!(bsb_value, m)?)?;
    Ok(())
}
