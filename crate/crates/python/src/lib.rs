//! Python bindings: datasets, channel, two-round models, the protocol and
//! its analytics, and the command line.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;

use mrmtl::channel::{self, ChannelKind};
use mrmtl::models::{self, ArchitectureConfig, TrainConfig};
use mrmtl::protocol::{self, SweepMode};
use mrmtl::{dataset, rng, Error};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Load { .. } => PyIOError::new_err(e.to_string()),
        Error::Argument(_) | Error::Config(_) | Error::Shape { .. } | Error::Format { .. } | Error::Json(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<PyObject> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_py(py),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_py(py),
            None => n.as_f64().unwrap_or(f64::NAN).into_py(py),
        },
        Value::String(s) => s.into_py(py),
        Value::Array(a) => {
            let items = a.iter().map(|x| json_to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new_bound(py, items).into_py(py)
        }
        Value::Object(m) => {
            let d = PyDict::new_bound(py);
            for (k, x) in m {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_py(py)
        }
    })
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<PyObject> {
    let v = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

#[pyclass(name = "ChannelConfig", module = "mrmtl_py")]
#[derive(Clone)]
struct PyChannelConfig {
    inner: channel::ChannelConfig,
}

#[pymethods]
impl PyChannelConfig {
    #[new]
    #[pyo3(signature = (kind = "awgn", snr_db = 10.0, seed = 0))]
    fn new(kind: &str, snr_db: f64, seed: u64) -> PyResult<Self> {
        let kind = match kind {
            "awgn" => ChannelKind::Awgn,
            "rayleigh" => ChannelKind::Rayleigh,
            other => return Err(PyValueError::new_err(format!("unknown channel {other:?}"))),
        };
        let inner = channel::ChannelConfig { kind, snr_db, seed };
        inner.validate().map_err(to_py_err)?;
        Ok(PyChannelConfig { inner })
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind.to_string()
    }

    #[getter]
    fn snr_db(&self) -> f64 {
        self.inner.snr_db
    }

    fn noise_variance(&self) -> f64 {
        self.inner.noise_variance()
    }

    /// Normalizes `symbols` to unit power and sends them through one channel
    /// instance drawn from `stream_seed`.
    #[pyo3(signature = (symbols, stream_seed, round = 1))]
    fn transmit(&self, symbols: Vec<f64>, stream_seed: u64, round: u8) -> PyResult<Vec<f64>> {
        let block = channel::normalize_power(&symbols).map_err(to_py_err)?;
        Ok(channel::transmit(&block, &self.inner, round, &mut rng::stream(stream_seed, &[])).symbols)
    }

    fn __repr__(&self) -> String {
        format!("ChannelConfig(kind={:?}, snr_db={}, seed={})", self.inner.kind.to_string(), self.inner.snr_db, self.inner.seed)
    }
}

#[pyclass(name = "Dataset", module = "mrmtl_py")]
struct PyDataset {
    inner: dataset::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (num_classes = 10, per_class = 40, seed = 0))]
    fn synthetic(num_classes: usize, per_class: usize, seed: u64) -> PyResult<Self> {
        Ok(PyDataset {
            inner: dataset::make_synthetic(num_classes, per_class, seed).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn cifar10(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: dataset::load_cifar10(&path).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn train_len(&self) -> usize {
        self.inner.train.len()
    }

    #[getter]
    fn test_len(&self) -> usize {
        self.inner.test.len()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names.clone()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    /// `(image, label)` with the image flattened channel-major in [0, 1].
    #[pyo3(signature = (index, split = "test"))]
    fn sample(&self, index: usize, split: &str) -> PyResult<(Vec<f64>, usize)> {
        let samples = match split {
            "train" => &self.inner.train,
            "test" => &self.inner.test,
            other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        };
        let s = samples
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
        Ok((s.image.clone(), s.label))
    }
}

#[pyclass(name = "MrmtlModel", module = "mrmtl_py")]
struct PyMrmtlModel {
    inner: models::MrmtlModel,
}

#[pymethods]
impl PyMrmtlModel {
    /// Untrained model with `n_c` channel uses per round.
    #[new]
    #[pyo3(signature = (n_c, w = 0.5, seed = 0, num_classes = 10))]
    fn new(n_c: usize, w: f64, seed: u64, num_classes: usize) -> PyResult<Self> {
        let arch = ArchitectureConfig {
            num_classes,
            ..ArchitectureConfig::symmetric(n_c)
        };
        arch.validate().map_err(to_py_err)?;
        Ok(PyMrmtlModel {
            inner: models::MrmtlModel::new(&arch, w, seed).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn load(bundle_dir: PathBuf) -> PyResult<Self> {
        let (inner, _) = models::load_mrmtl_bundle(&bundle_dir).map_err(to_py_err)?;
        Ok(PyMrmtlModel { inner })
    }

    #[getter]
    fn n_c1(&self) -> usize {
        self.inner.n_c1()
    }

    #[getter]
    fn n_c2(&self) -> usize {
        self.inner.n_c2()
    }

    /// Round-1 and Round-2 head test accuracies.
    fn evaluate(&self, py: Python<'_>, data: &PyDataset, channel: &PyChannelConfig, seed: u64) -> PyResult<(f64, f64)> {
        py.allow_threads(|| models::evaluate_mrmtl(&self.inner, &data.inner.test, &channel.inner, seed))
            .map_err(to_py_err)
    }

    /// Protocol traces on the test split at threshold `delta`.
    fn run_protocol(&self, py: Python<'_>, data: &PyDataset, delta: f64, channel: &PyChannelConfig, seed: u64) -> PyResult<PyObject> {
        let traces = py
            .allow_threads(|| protocol::run_protocol(&self.inner, &data.inner.test, delta, &channel.inner, seed))
            .map_err(to_py_err)?;
        let rows: Vec<_> = traces.iter().map(mrmtl::analysis::TraceRow::from).collect();
        to_py(py, &rows)
    }

    fn sweep(&self, py: Python<'_>, data: &PyDataset, grid: Vec<f64>, channel: &PyChannelConfig, seed: u64) -> PyResult<PyObject> {
        let sweep = py
            .allow_threads(|| protocol::sweep_threshold(&self.inner, &data.inner.test, &grid, &channel.inner, seed, SweepMode::Lazy))
            .map_err(to_py_err)?;
        to_py(py, &sweep.rows)
    }

    #[pyo3(signature = (data, channel, seed, bins = 50))]
    fn calibrate(&self, py: Python<'_>, data: &PyDataset, channel: &PyChannelConfig, seed: u64, bins: usize) -> PyResult<PyObject> {
        let stats = py
            .allow_threads(|| protocol::calibrate_threshold(&self.inner, &data.inner.test, &channel.inner, seed, bins))
            .map_err(to_py_err)?;
        to_py(py, &stats)
    }
}

/// Trains a two-round model; returns it with the per-epoch log.
#[pyfunction]
#[pyo3(signature = (data, n_c, channel, epochs = 5, batch = 8, lr = 1e-3, w = 0.5, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn train_mrmtl(
    py: Python<'_>,
    data: &PyDataset,
    n_c: usize,
    channel: &PyChannelConfig,
    epochs: usize,
    batch: usize,
    lr: f64,
    w: f64,
    seed: u64,
) -> PyResult<(PyMrmtlModel, PyObject)> {
    let arch = ArchitectureConfig {
        num_classes: data.inner.num_classes(),
        ..ArchitectureConfig::symmetric(n_c)
    };
    let train = TrainConfig {
        epochs,
        batch,
        lr,
        w,
        seed,
        deterministic: true,
    };
    let (model, log) = py
        .allow_threads(|| models::train_mrmtl(&data.inner, &arch, &channel.inner, &train))
        .map_err(to_py_err)?;
    Ok((PyMrmtlModel { inner: model }, to_py(py, &log.epochs)?))
}

#[pyfunction]
fn normalize_power(raw: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(channel::normalize_power(&raw).map_err(to_py_err)?.symbols)
}

#[pyfunction]
fn delta_star(mean_conf_correct: f64, mean_conf_incorrect: f64) -> f64 {
    protocol::delta_star(mean_conf_correct, mean_conf_incorrect)
}

#[pyfunction]
#[pyo3(signature = (confidences, correct, bins = 50))]
fn calibrate_from(py: Python<'_>, confidences: Vec<f64>, correct: Vec<bool>, bins: usize) -> PyResult<PyObject> {
    let stats = protocol::calibrate_from(&confidences, &correct, bins).map_err(to_py_err)?;
    to_py(py, &stats)
}

/// Runs the command line with `args` (without the program name); returns
/// the exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.allow_threads(|| mrmtl::cli::main_with_args(std::iter::once("mrmtl".to_string()).chain(args)))
}

#[pymodule]
fn mrmtl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyChannelConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyMrmtlModel>()?;
    m.add_function(wrap_pyfunction!(train_mrmtl, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_power, m)?)?;
    m.add_function(wrap_pyfunction!(delta_star, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_from, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("ALWAYS_ESCALATE", protocol::ALWAYS_ESCALATE)?;
    Ok(())
}
