//! Python bindings. Scenario documents and results cross the boundary as JSON text
//! and are decoded with the `json` module on the Python side.

use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyOSError, PyValueError};
use pyo3::prelude::*;
use serde_json::Value;
use syncgrid::scenarios::{self, Scenario, ScenarioError};

fn to_py(e: ScenarioError) -> PyErr {
    match e {
        ScenarioError::Unknown(_) => PyKeyError::new_err(e.to_string()),
        ScenarioError::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn loads<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (v.to_string(),))
}

fn prepare(name: &str, seed: Option<u64>, overrides: Option<&str>) -> PyResult<Scenario> {
    let mut s = scenarios::load(name).map_err(to_py)?;
    if let Some(text) = overrides {
        let map: serde_json::Map<String, Value> =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("overrides: {e}")))?;
        for (path, value) in map {
            s = s.with_override(&path, value).map_err(to_py)?;
        }
    }
    Ok(match seed {
        Some(v) => s.with_seed(v),
        None => s,
    })
}

fn overrides_text(py: Python<'_>, overrides: Option<&Bound<'_, PyAny>>) -> PyResult<Option<String>> {
    overrides
        .map(|o| py.import("json")?.call_method1("dumps", (o,))?.extract::<String>())
        .transpose()
}

/// `[(name, description), ...]` for every built-in scenario.
#[pyfunction]
fn list_scenarios() -> Vec<(String, String)> {
    scenarios::list_scenarios()
}

/// Scenario document (built-in name or file path) as a dict.
#[pyfunction]
fn scenario<'py>(py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyAny>> {
    let s = scenarios::load(name).map_err(to_py)?;
    loads(py, &s.to_value())
}

/// Runs a scenario in memory and returns its summary dict.
/// `overrides` maps dotted config paths to values, e.g. `{"control.delta": 0.0}`.
#[pyfunction]
#[pyo3(signature = (name, seed=None, overrides=None))]
fn run<'py>(
    py: Python<'py>,
    name: &str,
    seed: Option<u64>,
    overrides: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let text = overrides_text(py, overrides)?;
    let s = prepare(name, seed, text.as_deref())?;
    let summary = py
        .detach(|| scenarios::run(&s).map(|a| scenarios::summary(&s, &a)))
        .map_err(to_py)?;
    loads(py, &summary)
}

/// Runs a scenario and writes its artifacts under `out_dir/<name>`; returns that directory.
#[pyfunction]
#[pyo3(signature = (name, out_dir, seed=None))]
fn run_to_dir(py: Python<'_>, name: &str, out_dir: PathBuf, seed: Option<u64>) -> PyResult<PathBuf> {
    let s = prepare(name, seed, None)?;
    py.detach(|| syncgrid::cli::run_into(&s, &out_dir)).map_err(to_py)
}

/// Kuramoto order parameter of a set of phases as `(R, psi)`.
#[pyfunction]
fn order_parameter(phases: Vec<f64>) -> (f64, f64) {
    let z = syncgrid::powergrid::order_parameter(&phases);
    (z.norm(), z.arg())
}

#[pymodule]
fn syncgrid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(list_scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(scenario, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_to_dir, m)?)?;
    m.add_function(wrap_pyfunction!(order_parameter, m)?)?;
    Ok(())
}
