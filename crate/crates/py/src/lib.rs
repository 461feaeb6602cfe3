//! Python bindings: scenarios, runs, the safety filter, composition weights
//! and the path-integral estimators.

use std::path::PathBuf;

use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use safe_lsoc::compose;
use safe_lsoc::harness::{self, validate, RunMode};
use safe_lsoc::lsoc;
use safe_lsoc::scenarios::{self, bundled_names, load_scenario, parse_scenario};
use safe_lsoc::zcbf::{self, AffineConstraint, ConstraintId};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

type TimedState = (f64, f64, f64, f64, f64);

fn parse_mode(mode: &str) -> PyResult<RunMode> {
    mode.parse().map_err(value_err)
}

/// A validated scenario.
#[pyclass(name = "Scenario", module = "safe_lsoc", skip_from_py_object)]
#[derive(Clone)]
pub struct PyScenario {
    inner: scenarios::Scenario,
}

#[pymethods]
impl PyScenario {
    /// One of the scenarios shipped with the library.
    #[staticmethod]
    fn bundled(name: &str) -> PyResult<Self> {
        Ok(Self { inner: scenarios::Scenario::bundled(name).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_scenario(path).map_err(value_err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let file = parse_scenario(text).map_err(value_err)?;
        Ok(Self { inner: scenarios::Scenario::from_file(file).map_err(value_err)? })
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner.file).expect("scenario serializes")
    }

    /// Copy with every obstacle margin replaced.
    fn with_margin(&self, margin: f64) -> PyResult<Self> {
        Ok(Self { inner: self.inner.with_margin(margin).map_err(value_err)? })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    #[getter]
    fn agent_count(&self) -> usize {
        self.inner.agent_count()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.file.sim.seeds.clone()
    }

    /// `(center, radius, margin)` per obstacle.
    #[getter]
    fn obstacles(&self) -> Vec<([f64; 2], f64, f64)> {
        self.inner.obstacles().iter().map(|o| (o.center, o.radius, o.margin)).collect()
    }

    #[getter]
    fn targets(&self) -> Vec<[f64; 2]> {
        self.inner.file.agents.iter().map(|a| a.target).collect()
    }

    fn __repr__(&self) -> String {
        format!("Scenario({:?}, agents={}, obstacles={})", self.inner.name(), self.inner.agent_count(), self.inner.obstacles().len())
    }
}

/// Result of one execution.
#[pyclass(name = "RunResult", module = "safe_lsoc")]
pub struct PyRunResult {
    inner: harness::RunResult,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn scenario(&self) -> String {
        self.inner.scenario.clone()
    }

    #[getter]
    fn task(&self) -> String {
        self.inner.task.clone()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.as_str()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.metrics.steps
    }

    #[getter]
    fn terminal_error(&self) -> Vec<f64> {
        self.inner.metrics.terminal_error.clone()
    }

    /// `[agent][obstacle]` minimum center distance.
    #[getter]
    fn min_center_distance(&self) -> Vec<Vec<f64>> {
        self.inner.metrics.min_center_distance.clone()
    }

    #[getter]
    fn safety_violations(&self) -> usize {
        self.inner.metrics.safety_violations
    }

    #[getter]
    fn filter_activations(&self) -> usize {
        self.inner.metrics.filter_activations
    }

    /// `(agents, initial, mean)` per cooperating pair.
    #[getter]
    fn pair_distances(&self) -> Vec<([usize; 2], f64, f64)> {
        self.inner.metrics.pair_distances.iter().map(|p| (p.agents, p.initial, p.mean)).collect()
    }

    #[getter]
    fn exit_reasons(&self) -> Vec<&'static str> {
        self.inner.exit_reasons().iter().map(|r| r.as_str()).collect()
    }

    #[getter]
    fn halted(&self) -> Option<String> {
        self.inner.halted.clone()
    }

    /// `[agent]` list of `(t, x, y, v, φ)` states.
    fn states(&self) -> Vec<Vec<TimedState>> {
        self.inner.trajectories.iter().map(|t| t.times.iter().zip(&t.states).map(|(time, s)| (*time, s[0], s[1], s[2], s[3])).collect()).collect()
    }

    fn trajectory_csv(&self) -> String {
        harness::trajectory_csv(&self.inner)
    }

    fn metrics_json(&self) -> String {
        harness::metrics_json(&self.inner)
    }

    /// Writes the CSV and JSON files; returns their paths.
    fn export(&self, out_dir: PathBuf) -> PyResult<Vec<PathBuf>> {
        harness::export(&self.inner, &out_dir).map_err(runtime_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "RunResult({} {} {} seed {}, steps {})",
            self.inner.scenario,
            self.inner.task,
            self.inner.mode.as_str(),
            self.inner.seed,
            self.inner.metrics.steps
        )
    }
}

/// Every agent toward its own target.
#[pyfunction]
#[pyo3(signature = (scenario, mode = "filtered", seed = 1))]
fn run_task(py: Python<'_>, scenario: &PyScenario, mode: &str, seed: u64) -> PyResult<PyRunResult> {
    let mode = parse_mode(mode)?;
    let s = scenario.inner.clone();
    let inner = py.detach(move || harness::run_task(&s, mode, seed)).map_err(runtime_err)?;
    Ok(PyRunResult { inner })
}

#[pyfunction]
#[pyo3(signature = (scenario, component, mode = "filtered", seed = 1))]
fn run_component(py: Python<'_>, scenario: &PyScenario, component: usize, mode: &str, seed: u64) -> PyResult<PyRunResult> {
    let mode = parse_mode(mode)?;
    let s = scenario.inner.clone();
    let inner = py.detach(move || harness::run_component(&s, component, mode, seed)).map_err(runtime_err)?;
    Ok(PyRunResult { inner })
}

/// Composite execution toward the scenario's new target.
#[pyfunction]
#[pyo3(signature = (scenario, mode = "filtered", seed = 1))]
fn run_composite(py: Python<'_>, scenario: &PyScenario, mode: &str, seed: u64) -> PyResult<PyRunResult> {
    let mode = parse_mode(mode)?;
    let s = scenario.inner.clone();
    let inner = py.detach(move || harness::run_generalization(&s, mode, seed)).map_err(runtime_err)?;
    Ok(PyRunResult { inner })
}

/// Rows of `(margin, mode, obstacle, threshold, min, mean, max, below, runs)`.
#[pyfunction]
#[pyo3(signature = (scenario, margins, seeds, modes = vec!["baseline".to_string(), "filtered".to_string()]))]
#[allow(clippy::type_complexity)]
fn margin_sweep(
    py: Python<'_>,
    scenario: &PyScenario,
    margins: Vec<f64>,
    seeds: Vec<u64>,
    modes: Vec<String>,
) -> PyResult<Vec<(f64, &'static str, usize, f64, f64, f64, f64, usize, usize)>> {
    let modes: Vec<RunMode> = modes.iter().map(|m| parse_mode(m)).collect::<PyResult<_>>()?;
    let s = scenario.inner.clone();
    let rows = py.detach(move || harness::margin_sweep(&s, &margins, &seeds, &modes)).map_err(runtime_err)?;
    Ok(rows.iter().map(|r| (r.margin, r.mode.as_str(), r.obstacle, r.threshold, r.min, r.mean, r.max, r.below_threshold, r.runs)).collect())
}

/// Minimum-deviation projection of `u` onto `{v : aᵢᵀv ≥ bᵢ}`.
#[pyfunction]
fn safety_filter(u: Vec<f64>, constraints: Vec<(Vec<f64>, f64)>) -> PyResult<Vec<f64>> {
    let cons: Vec<AffineConstraint> = constraints
        .into_iter()
        .enumerate()
        .map(|(k, (a, b))| AffineConstraint::new(DVector::from_vec(a), b, ConstraintId { obstacle: k, level: 0 }))
        .collect::<Result<_, _>>()
        .map_err(value_err)?;
    let out = zcbf::safety_filter(&DVector::from_vec(u), &cons).map_err(runtime_err)?;
    Ok(out.iter().copied().collect())
}

/// Normalized kernel weights `ω̃` of component targets for a new target.
#[pyfunction]
#[pyo3(signature = (targets, new_target, kernel))]
fn composition_weights(targets: Vec<Vec<f64>>, new_target: Vec<f64>, kernel: Vec<f64>) -> PyResult<Vec<f64>> {
    let targets: Vec<DVector<f64>> = targets.into_iter().map(DVector::from_vec).collect();
    let w = compose::composition_weights(&targets, &DVector::from_vec(new_target), &DVector::from_vec(kernel)).map_err(value_err)?;
    Ok(w.normalized)
}

/// Mixing weights `W ∝ ω̃ Z` from normalized kernel weights and `log Z`.
#[pyfunction]
fn state_weights(normalized: Vec<f64>, log_z: Vec<f64>) -> PyResult<Vec<f64>> {
    let weights = compose::CompositionWeights { raw: normalized.clone(), kernel: DVector::zeros(0), normalized };
    compose::state_weights(&weights, &log_z).map_err(value_err)
}

/// `Σ W^f u^f`.
#[pyfunction]
fn composite_control(weights: Vec<f64>, controls: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let controls: Vec<DVector<f64>> = controls.into_iter().map(DVector::from_vec).collect();
    Ok(compose::composite_control(&weights, &controls).map_err(value_err)?.iter().copied().collect())
}

/// `log((1/K) Σ exp(-S_k/λ))` for path costs `S_k`.
#[pyfunction]
fn log_desirability(costs: Vec<f64>, temperature: f64) -> PyResult<f64> {
    if costs.is_empty() || temperature.is_nan() || temperature <= 0.0 {
        return Err(PyValueError::new_err("need at least one cost and a positive temperature"));
    }
    Ok(lsoc::log_desirability(&costs, temperature))
}

/// `R = λ(σσᵀ)⁻¹` for a square noise matrix given by rows.
#[pyfunction]
fn control_weight(sigma: Vec<Vec<f64>>, temperature: f64) -> PyResult<Vec<Vec<f64>>> {
    let n = sigma.len();
    if sigma.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("sigma must be square"));
    }
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| sigma[i][j]);
    let r = safe_lsoc::sde::derive_control_weight(&m, temperature).map_err(value_err)?;
    Ok((0..n).map(|i| (0..n).map(|j| r[(i, j)]).collect()).collect())
}

/// `(name, passed, detail)` for each built-in oracle check.
#[pyfunction]
#[pyo3(signature = (seed = 1))]
fn validate_all(py: Python<'_>, seed: u64) -> Vec<(String, bool, String)> {
    py.detach(move || validate::run_all(seed)).into_iter().map(|o| (o.name, o.passed, o.detail)).collect()
}

#[pyfunction]
fn bundled_scenarios() -> Vec<&'static str> {
    bundled_names()
}

#[pymodule(name = "safe_lsoc")]
fn safe_lsoc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(run_task, m)?)?;
    m.add_function(wrap_pyfunction!(run_component, m)?)?;
    m.add_function(wrap_pyfunction!(run_composite, m)?)?;
    m.add_function(wrap_pyfunction!(margin_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(safety_filter, m)?)?;
    m.add_function(wrap_pyfunction!(composition_weights, m)?)?;
    m.add_function(wrap_pyfunction!(state_weights, m)?)?;
    m.add_function(wrap_pyfunction!(composite_control, m)?)?;
    m.add_function(wrap_pyfunction!(log_desirability, m)?)?;
    m.add_function(wrap_pyfunction!(control_weight, m)?)?;
    m.add_function(wrap_pyfunction!(validate_all, m)?)?;
    m.add_function(wrap_pyfunction!(bundled_scenarios, m)?)?;
    Ok(())
}
