//! Python bindings: networks, the ML-VAMP engine, state evolution and the
//! experiment harness. Configurations are passed as dicts or JSON strings
//! with the same fields as the command line config files.

use ::mlvamp as core;
use core::engine::{run, EngineConfig};
use core::harness::{aggregate, run_trials, ExperimentConfig, Recipe};
use core::model::{forward_generate, NetworkSpec, SignalSet};
use core::state_evolution::{matched_mmse_recursion, run_se, MatchedConfig, PerturbationLaw, SeConfig};
use nalgebra::DVector;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList, PyString};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

fn to_py_err(e: core::Error) -> PyErr {
    match e {
        core::Error::Io(e) => PyOSError::new_err(e.to_string()),
        core::Error::Diverged { .. } | core::Error::NumericFailure(_) => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(a) => {
            let list = PyList::empty(py);
            for x in a {
                list.append(json_to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(m) => {
            let d = PyDict::new(py);
            for (k, x) in m {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

/// Parse an optional dict or JSON string into a config, with defaults when
/// absent.
fn config<T: DeserializeOwned + Default>(py: Python<'_>, obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let Some(obj) = obj else { return Ok(T::default()) };
    let text: String = if let Ok(s) = obj.extract::<String>() {
        s
    } else {
        py.import("json")?.call_method1("dumps", (obj,))?.extract()?
    };
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(format!("bad config: {e}")))
}

fn signals_from(z: Vec<Vec<f64>>) -> SignalSet {
    SignalSet { z: z.into_iter().map(DVector::from_vec).collect() }
}

/// A multi-layer network: alternating linear and elementwise layers.
#[pyclass(name = "Network", module = "mlvamp", frozen)]
struct PyNetwork {
    spec: NetworkSpec,
}

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { spec: NetworkSpec::from_json_str(text).map_err(to_py_err)? })
    }

    /// Random relu prior with a conditioned linear measurement.
    #[staticmethod]
    #[pyo3(signature = (seed, recipe=None))]
    fn synthetic(py: Python<'_>, seed: u64, recipe: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let recipe: Recipe = config(py, recipe)?;
        Ok(Self { spec: recipe.build(seed).map_err(to_py_err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.spec.to_json_string().map_err(to_py_err)
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.spec.dims().to_vec()
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.spec.num_layers()
    }

    /// Signals `z_0, ..., z_L` of one draw; the last entry is the measurement.
    fn generate(&self, seed: u64) -> Vec<Vec<f64>> {
        forward_generate(&self.spec, seed).z.into_iter().map(|v| v.as_slice().to_vec()).collect()
    }

    fn __repr__(&self) -> String {
        format!("Network(dims={:?})", self.spec.dims())
    }
}

/// Run ML-VAMP on measurement `y`. With `signals` the trace records the NMSE
/// of every estimate.
#[pyfunction]
#[pyo3(signature = (network, y, config=None, signals=None))]
fn run_engine<'py>(py: Python<'py>, network: &PyNetwork, y: Vec<f64>, config: Option<&Bound<'py, PyAny>>, signals: Option<Vec<Vec<f64>>>) -> PyResult<Bound<'py, PyDict>> {
    let cfg: EngineConfig = self::config(py, config)?;
    let y = DVector::from_vec(y);
    let truth = signals.map(signals_from);
    let spec = &network.spec;
    let out = py.detach(|| run(spec, &y, &cfg, truth.as_ref())).map_err(to_py_err)?;
    let report = core::fixed_point_report(spec, &y, &out.state, cfg.mode);
    let d = PyDict::new(py);
    d.set_item("estimates", out.state.estimates().iter().map(|v| v.as_slice().to_vec()).collect::<Vec<_>>())?;
    d.set_item("converged", out.converged)?;
    d.set_item("iterations", out.state.iterations)?;
    d.set_item("trace", to_py(py, &out.trace.records)?)?;
    d.set_item("clips", to_py(py, &out.trace.clips)?)?;
    d.set_item("fixed_point", to_py(py, &report)?)?;
    Ok(d)
}

/// State-evolution prediction for the network's ensemble.
#[pyfunction]
#[pyo3(signature = (network, config=None))]
fn state_evolution<'py>(py: Python<'py>, network: &PyNetwork, config: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: SeConfig = self::config(py, config)?;
    let law = PerturbationLaw::from_network(&network.spec);
    let se = py.detach(|| run_se(&law, &cfg)).map_err(to_py_err)?;
    to_py(py, &se)
}

/// Fixed point of the matched MMSE recursion.
#[pyfunction]
#[pyo3(signature = (network, config=None))]
fn matched_fixed_point<'py>(py: Python<'py>, network: &PyNetwork, config: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: MatchedConfig = self::config(py, config)?;
    let law = PerturbationLaw::from_network(&network.spec);
    let fp = py.detach(|| matched_mmse_recursion(&law, &cfg)).map_err(to_py_err)?;
    to_py(py, &fp)
}

/// Independent synthetic trials. Returns the per-trial rows, the per-cell
/// summary and any failed trials.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn run_experiment<'py>(py: Python<'py>, config: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyDict>> {
    let cfg: ExperimentConfig = self::config(py, config)?;
    let set = py.detach(|| run_trials(&cfg)).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("rows", to_py(py, &set.rows)?)?;
    d.set_item("summary", to_py(py, &aggregate(&set.rows))?)?;
    d.set_item("failures", to_py(py, &set.failures)?)?;
    Ok(d)
}

/// `10 log10(||est - truth||^2 / ||truth||^2)`.
#[pyfunction]
fn nmse_db(est: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    core::nmse_db(&DVector::from_vec(est), &DVector::from_vec(truth)).map_err(to_py_err)
}

#[pymodule]
#[pyo3(name = "mlvamp")]
fn mlvamp_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(run_engine, m)?)?;
    m.add_function(wrap_pyfunction!(state_evolution, m)?)?;
    m.add_function(wrap_pyfunction!(matched_fixed_point, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(nmse_db, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
