//! Python bindings: spin states, packets, and the canned exchange scenarios.
//!
//! Scalar results cross as native Python types (complex included); report
//! structs cross as plain dicts mirroring their JSON serialization, so the
//! Python side sees exactly what the CLI writes to disk.

use std::collections::HashMap;

use num_complex::Complex64;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pilotwave::guidance::equivariance_test;
use pilotwave::notation::{parse_state, render_factored};
use pilotwave::packet::{GaussianPacket, PhysicalParams};
use pilotwave::protocol::{
    default_exchange, drift_exchange, recombination_check, recombine_exchange,
};
use pilotwave::spin::{self, InternalState, SlotId};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    match v {
        serde_json::Value::Null => Ok(py.None()),
        serde_json::Value::Bool(b) => b.into_py_any(py),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py_any(py)
            } else if let Some(u) = n.as_u64() {
                u.into_py_any(py)
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_py_any(py)
            }
        }
        serde_json::Value::String(s) => s.into_py_any(py),
        serde_json::Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_py_any(py)
        }
        serde_json::Value::Object(map) => {
            let dict = PyDict::new(py);
            for (key, item) in map {
                dict.set_item(key, json_to_py(py, item)?)?;
            }
            dict.into_py_any(py)
        }
    }
}

fn to_py_report<T: serde::Serialize>(py: Python<'_>, report: &T) -> PyResult<Py<PyAny>> {
    let value = serde_json::to_value(report).map_err(value_err)?;
    json_to_py(py, &value)
}

/// A sparse internal spin state over numbered slots.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct SpinState {
    inner: InternalState,
}

#[pymethods]
impl SpinState {
    /// Parse an expression like `"alpha(1,2) alpha(3,4)"` or `"a1 b2 - b1 a2"`.
    #[staticmethod]
    #[pyo3(signature = (expr, n_slots = 4))]
    fn parse(expr: &str, n_slots: u8) -> PyResult<Self> {
        match parse_state(expr, n_slots) {
            Ok(inner) => Ok(SpinState { inner }),
            Err(e) => Err(PyValueError::new_err(e.render(expr))),
        }
    }

    fn __str__(&self) -> String {
        render_factored(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("<SpinState {}>", render_factored(&self.inner))
    }

    #[getter]
    fn slots(&self) -> Vec<u32> {
        // Not u8: a Vec<u8> would cross into Python as `bytes`.
        self.inner.slots().iter().map(|s| u32::from(s.0)).collect()
    }

    fn norm(&self) -> f64 {
        self.inner.norm()
    }

    fn tensor(&self, other: &SpinState) -> PyResult<SpinState> {
        let inner =
            spin::tensor(&[self.inner.clone(), other.inner.clone()]).map_err(value_err)?;
        Ok(SpinState { inner })
    }

    fn inner_product(&self, other: &SpinState) -> PyResult<Complex64> {
        self.inner.inner(&other.inner).map_err(value_err)
    }

    /// Whether the state is entangled across the (disjoint, nonempty) slot
    /// groups `left` and `right`.
    fn is_entangled(&self, left: Vec<u8>, right: Vec<u8>) -> PyResult<bool> {
        let l: Vec<SlotId> = left.into_iter().map(SlotId).collect();
        let r: Vec<SlotId> = right.into_iter().map(SlotId).collect();
        spin::is_entangled(&self.inner, &l, &r).map_err(value_err)
    }

    /// Full 4x4 coefficient table over the product Bell basis of the two
    /// pairs, as a dict keyed by `(kind1, kind2)` name tuples.
    #[pyo3(signature = (pair1 = (1, 3), pair2 = (2, 4)))]
    fn bell_decompose(
        &self,
        pair1: (u8, u8),
        pair2: (u8, u8),
    ) -> PyResult<HashMap<(String, String), Complex64>> {
        let coeffs = spin::bell_decompose(
            &self.inner,
            (SlotId(pair1.0), SlotId(pair1.1)),
            (SlotId(pair2.0), SlotId(pair2.1)),
        )
        .map_err(value_err)?;
        Ok(coeffs
            .iter()
            .map(|(m, n, c)| ((m.name().to_string(), n.name().to_string()), c))
            .collect())
    }
}

/// A Gaussian wavepacket in one dimension.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct Packet {
    inner: GaussianPacket,
}

#[pymethods]
impl Packet {
    #[new]
    #[pyo3(signature = (center, sigma, wavenumber = 0.0, phase = 0.0, chirp = 0.0))]
    fn new(center: f64, sigma: f64, wavenumber: f64, phase: f64, chirp: f64) -> PyResult<Self> {
        let inner = GaussianPacket::new(center, sigma)
            .map_err(value_err)?
            .with_wavenumber(wavenumber)
            .with_phase(phase)
            .with_chirp(chirp)
            .validated()
            .map_err(value_err)?;
        Ok(Packet { inner })
    }

    #[getter]
    fn center(&self) -> f64 {
        self.inner.center
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }

    #[getter]
    fn wavenumber(&self) -> f64 {
        self.inner.wavenumber
    }

    #[getter]
    fn phase(&self) -> f64 {
        self.inner.phase
    }

    #[getter]
    fn chirp(&self) -> f64 {
        self.inner.chirp
    }

    fn __repr__(&self) -> String {
        format!(
            "Packet(center={}, sigma={}, wavenumber={}, phase={}, chirp={})",
            self.inner.center,
            self.inner.sigma,
            self.inner.wavenumber,
            self.inner.phase,
            self.inner.chirp
        )
    }

    /// psi(x).
    fn evaluate(&self, x: f64) -> Complex64 {
        self.inner.evaluate(x)
    }

    /// |psi(x)|^2.
    fn density(&self, x: f64) -> f64 {
        self.inner.density(x)
    }

    /// Exact free evolution for time `t`, returning the evolved packet.
    #[pyo3(signature = (t, mass = 1.0, hbar = 1.0))]
    fn free_evolve(&self, t: f64, mass: f64, hbar: f64) -> PyResult<Packet> {
        let inner = self
            .inner
            .free_evolve(PhysicalParams { hbar }, mass, self.inner.born_at + t)
            .map_err(value_err)?;
        Ok(Packet { inner })
    }
}

/// Convenience wrapper: parse `expr` and expand it over the product Bell
/// basis in one call.
#[pyfunction]
#[pyo3(signature = (expr, pair1 = (1, 3), pair2 = (2, 4), n_slots = 4))]
fn bell_expand(
    expr: &str,
    pair1: (u8, u8),
    pair2: (u8, u8),
    n_slots: u8,
) -> PyResult<HashMap<(String, String), Complex64>> {
    SpinState::parse(expr, n_slots)?.bell_decompose(pair1, pair2)
}

/// Run the entanglement-exchange ensemble and return
/// `{"stats": ..., "records": [...]}` as plain dicts.
#[pyfunction]
#[pyo3(signature = (runs = None, seed = None, drift = false, trajectories = 0))]
fn run_exchange(
    py: Python<'_>,
    runs: Option<usize>,
    seed: Option<u64>,
    drift: bool,
    trajectories: usize,
) -> PyResult<Py<PyAny>> {
    let mut scenario = if drift {
        drift_exchange()
    } else {
        default_exchange()
    };
    if let Some(n) = runs {
        scenario.n_runs = n;
    }
    if let Some(s) = seed {
        scenario.base_seed = s;
    }
    scenario.trajectory_runs = trajectories;
    let prepared = scenario.prepare().map_err(value_err)?;
    let (records, stats) = prepared.run_ensemble().map_err(value_err)?;
    let value = serde_json::json!({ "stats": stats, "records": records });
    json_to_py(py, &value)
}

/// Born-distribution preservation under free spreading; returns the report
/// as a dict. `t_factor` is theta = hbar t / (2 m sigma^2).
#[pyfunction]
#[pyo3(signature = (n = 2000, t_factor = 1.732_050_807_568_877_2, seed = 42, dt = 0.02, sigma = 1.0))]
fn equivariance(
    py: Python<'_>,
    n: usize,
    t_factor: f64,
    seed: u64,
    dt: f64,
    sigma: f64,
) -> PyResult<Py<PyAny>> {
    let p0 = GaussianPacket::new(0.0, sigma).map_err(value_err)?;
    let params = PhysicalParams::default();
    let mass = 1.0;
    let t = t_factor * 2.0 * mass * sigma * sigma / params.hbar;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report =
        equivariance_test(p0, params, mass, n, t, dt, &mut rng).map_err(value_err)?;
    to_py_report(py, &report)
}

/// Run the pointer-recombination scenario and return its report as a dict.
#[pyfunction]
#[pyo3(signature = (runs = 2000, seed = 42))]
fn recombination(py: Python<'_>, runs: usize, seed: u64) -> PyResult<Py<PyAny>> {
    let mut scenario = recombine_exchange();
    scenario.n_runs = runs;
    scenario.base_seed = seed;
    let report = recombination_check(&scenario).map_err(value_err)?;
    to_py_report(py, &report)
}

#[pymodule]
fn pilotwave_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<SpinState>()?;
    m.add_class::<Packet>()?;
    m.add_function(wrap_pyfunction!(bell_expand, m)?)?;
    m.add_function(wrap_pyfunction!(run_exchange, m)?)?;
    m.add_function(wrap_pyfunction!(equivariance, m)?)?;
    m.add_function(wrap_pyfunction!(recombination, m)?)?;
    Ok(())
}
