//! Python bindings: generate tasks, pretrain reference networks, run
//! unlearning with routing constraints and sweep the null-space threshold.
//!
//! Configurations cross the boundary as dicts holding any subset of the
//! library's config fields; missing keys take their defaults and unknown
//! keys raise `ValueError`. Reports come back as plain dicts.

use std::path::PathBuf;

use grip_core::moe::{argmax, network_forward, read_checkpoint, write_checkpoint, MoENetwork, NetShape};
use grip_core::unlearn::{
    generate_task, init_network, pretrain as core_pretrain, sweep_eps as core_sweep, unlearn_run, PretrainConfig,
    SyntheticTask, TaskConfig, UnlearnConfig, SWEEP_EPS,
};
use grip_core::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};
use serde::de::DeserializeOwned;
use serde::Serialize;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Contract(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Deserializes an optional dict through JSON, applying serde defaults.
fn from_dict<T: DeserializeOwned + Default>(py: Python<'_>, d: Option<&Bound<'_, PyDict>>, what: &str) -> PyResult<T> {
    let Some(d) = d else { return Ok(T::default()) };
    let text: String = PyModule::import(py, "json")?.call_method1("dumps", (d,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(format!("invalid {what} config: {e}")))
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    PyModule::import(py, "json")?.call_method1("loads", (text,))
}

fn task_for(py: Python<'_>, seed: u64, task: Option<&Bound<'_, PyDict>>) -> PyResult<SyntheticTask> {
    let cfg = TaskConfig { seed, ..from_dict(py, task, "task")? };
    py.detach(|| generate_task(&cfg)).map_err(to_py_err)
}

/// Network shape matching `task`, with architecture overrides from `shape`.
fn shape_for(py: Python<'_>, task: &TaskConfig, shape: Option<&Bound<'_, PyDict>>) -> PyResult<NetShape> {
    let s: NetShape = from_dict(py, shape, "shape")?;
    let explicit = |key: &str| -> PyResult<bool> { Ok(shape.map(|d| d.contains(key)).transpose()?.unwrap_or(false)) };
    let dim = if explicit("dim")? { s.dim } else { task.dim };
    let classes = if explicit("classes")? { s.classes } else { task.classes };
    if dim != task.dim || classes != task.classes {
        return Err(PyValueError::new_err(format!(
            "shape (dim {dim}, classes {classes}) does not match task (dim {}, classes {})",
            task.dim, task.classes
        )));
    }
    Ok(NetShape { dim, classes, ..s })
}

/// A mixture-of-experts classifier with top-k routing.
#[pyclass(module = "grip_py")]
struct Network {
    inner: MoENetwork,
}

#[pymethods]
impl Network {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        read_checkpoint(&path).map(|inner| Self { inner }).map_err(to_py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_checkpoint(&self.inner, &path).map_err(to_py_err)
    }

    /// Layers, experts, dim, k and classes.
    #[getter]
    fn shape<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.shape())
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// Predicted class of each input row.
    fn predict(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        inputs
            .iter()
            .map(|x| network_forward(&self.inner, x).map(|(logits, _)| argmax(&logits)))
            .collect::<Result<_, _>>()
            .map_err(to_py_err)
    }

    /// Selected experts of one input at every layer, ascending.
    fn route(&self, x: Vec<f64>) -> PyResult<Vec<Vec<usize>>> {
        let (_, trace) = network_forward(&self.inner, &x).map_err(to_py_err)?;
        Ok(trace.iter().map(|t| t.selection.indices().to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        let s = self.inner.shape();
        format!(
            "Network(layers={}, experts={}, dim={}, k={}, classes={})",
            s.layers, s.experts, s.dim, s.k, s.classes
        )
    }
}

/// Default values of one config section: "shape", "task", "pretrain" or
/// "unlearn".
#[pyfunction]
fn default_config<'py>(py: Python<'py>, section: &str) -> PyResult<Bound<'py, PyAny>> {
    match section {
        "shape" => to_py(py, &NetShape::default()),
        "task" => to_py(py, &TaskConfig::default()),
        "pretrain" => to_py(py, &PretrainConfig::default()),
        "unlearn" => to_py(py, &UnlearnConfig::default()),
        other => Err(PyValueError::new_err(format!(
            "unknown section '{other}' (expected shape, task, pretrain or unlearn)"
        ))),
    }
}

/// The synthetic task of `seed`: its config and every split as
/// `{"ids", "inputs", "labels"}`.
#[pyfunction]
#[pyo3(signature = (seed, task=None))]
fn task<'py>(py: Python<'py>, seed: u64, task: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyDict>> {
    let t = task_for(py, seed, task)?;
    let out = PyDict::new(py);
    out.set_item("config", to_py(py, &t.config)?)?;
    for (name, split) in [
        ("retain_train", &t.retain_train),
        ("forget_train", &t.forget_train),
        ("retain_test", &t.retain_test),
        ("forget_test", &t.forget_test),
    ] {
        let d = PyDict::new(py);
        d.set_item("ids", &split.ids)?;
        d.set_item("inputs", &split.inputs)?;
        d.set_item("labels", &split.labels)?;
        out.set_item(name, d)?;
    }
    Ok(out)
}

/// Trains the reference network of `seed`. Returns `(network, report)`.
#[pyfunction]
#[pyo3(signature = (seed, task=None, shape=None, config=None))]
fn pretrain<'py>(
    py: Python<'py>,
    seed: u64,
    task: Option<&Bound<'py, PyDict>>,
    shape: Option<&Bound<'py, PyDict>>,
    config: Option<&Bound<'py, PyDict>>,
) -> PyResult<(Network, Bound<'py, PyAny>)> {
    let t = task_for(py, seed, task)?;
    let shape = shape_for(py, &t.config, shape)?;
    let cfg: PretrainConfig = from_dict(py, config, "pretrain")?;
    let (net, report) = py
        .detach(|| {
            let net0 = init_network(shape, cfg.router_scale, seed)?;
            core_pretrain(&net0, &t, &cfg)
        })
        .map_err(to_py_err)?;
    Ok((Network { inner: net }, to_py(py, &report)?))
}

/// One unlearning run from `network` on the task of `seed`. Returns
/// `(unlearned network, report)`.
#[pyfunction]
#[pyo3(signature = (network, seed, config=None, task=None))]
fn unlearn<'py>(
    py: Python<'py>,
    network: PyRef<'py, Network>,
    seed: u64,
    config: Option<&Bound<'py, PyDict>>,
    task: Option<&Bound<'py, PyDict>>,
) -> PyResult<(Network, Bound<'py, PyAny>)> {
    let t = task_for(py, seed, task)?;
    let cfg = UnlearnConfig { seed, ..from_dict(py, config, "unlearn")? };
    let pre = &network.inner;
    let (net, report) = py.detach(|| unlearn_run(pre, &t, &cfg, None)).map_err(to_py_err)?;
    Ok((Network { inner: net }, to_py(py, &report)?))
}

/// Expert-specific runs at each threshold (default 1e-4, 1e-3, 1e-2, 1e-1).
/// Returns one dict per threshold.
#[pyfunction]
#[pyo3(signature = (network, seed, config=None, task=None, eps_values=None))]
fn sweep_eps<'py>(
    py: Python<'py>,
    network: PyRef<'py, Network>,
    seed: u64,
    config: Option<&Bound<'py, PyDict>>,
    task: Option<&Bound<'py, PyDict>>,
    eps_values: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyAny>> {
    let t = task_for(py, seed, task)?;
    let cfg = UnlearnConfig { seed, ..from_dict(py, config, "unlearn")? };
    let eps = eps_values.unwrap_or_else(|| SWEEP_EPS.to_vec());
    let pre = &network.inner;
    let rows = py.detach(|| core_sweep(pre, &t, &cfg, &eps)).map_err(to_py_err)?;
    to_py(py, &rows)
}

#[pymodule]
fn grip_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Network>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(task, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(unlearn, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_eps, m)?)?;
    Ok(())
}
