//! Python bindings. Matrices cross the boundary as lists of rows; reports
//! come back as JSON strings.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use attnshift::bench::{self, Mechanism};
use attnshift::layers::{self, NormMode};
use attnshift::train::{self, TemporalMode, TrainConfig};
use attnshift::verify::{self, SuiteConfig};
use attnshift::{report, spectral, Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Dimension { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(py_err)
}

/// Subtracts the per-column mean over rows.
#[pyfunction]
fn instance_center(z: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(layers::instance_center(&matrix(z)?).to_rows())
}

#[pyfunction]
fn operator_2_norm(w: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(spectral::operator_2_norm(&matrix(w)?))
}

#[pyfunction]
fn fine_coarse_len(n: usize, l: usize, r: usize) -> usize {
    layers::frames::fine_coarse_len(n, l, r)
}

/// Returns `(flops, context_len)`.
#[pyfunction]
#[pyo3(signature = (mechanism, n, l, d, r=None))]
fn flop_estimate(mechanism: &str, n: usize, l: usize, d: usize, r: Option<usize>) -> PyResult<(u64, usize)> {
    let mech = Mechanism::parse(mechanism).ok_or_else(|| PyValueError::new_err(format!("unknown mechanism {mechanism}")))?;
    let est = bench::flop_estimate(mech, n, l, d, r).map_err(py_err)?;
    Ok((est.flops, est.context_len))
}

#[pyfunction]
#[pyo3(signature = (seed=42, trials=20_000, d=4, norm_mode="instance_center", expect_centering_failure=false))]
fn verify_json(seed: u64, trials: usize, d: usize, norm_mode: &str, expect_centering_failure: bool) -> PyResult<String> {
    let norm_mode = NormMode::parse(norm_mode).ok_or_else(|| PyValueError::new_err(format!("unknown norm mode {norm_mode}")))?;
    let cfg = SuiteConfig {
        d,
        trials,
        norm_mode,
        expect_centering_failure,
        ..SuiteConfig::default()
    };
    let families = verify::run_suite(&cfg, seed).map_err(py_err)?;
    let passed = families.iter().all(|f| f.passed());
    let v = serde_json::json!({
        "passed": passed,
        "families": families.iter().map(|f| f.to_json()).collect::<Vec<_>>(),
    });
    Ok(report::to_pretty(&v))
}

#[pyfunction]
#[pyo3(signature = (mode="stam", steps=500, seed=42))]
fn train_json(mode: &str, steps: usize, seed: u64) -> PyResult<String> {
    let mode = TemporalMode::parse(mode).ok_or_else(|| PyValueError::new_err(format!("unknown mode {mode}")))?;
    let mut cfg = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    cfg.model.mode = mode;
    let (rep, _) = train::train_oneshot(&cfg, seed).map_err(py_err)?;
    Ok(report::to_pretty(&rep.to_json()))
}

#[pymodule]
fn attnshift_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(instance_center, m)?)?;
    m.add_function(wrap_pyfunction!(operator_2_norm, m)?)?;
    m.add_function(wrap_pyfunction!(fine_coarse_len, m)?)?;
    m.add_function(wrap_pyfunction!(flop_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(verify_json, m)?)?;
    m.add_function(wrap_pyfunction!(train_json, m)?)?;
    Ok(())
}
