use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use deepfed_core::data::{self, Shard};
use deepfed_core::experiment::{self, ExperimentError};
use deepfed_core::federated::{self, Algo};
use deepfed_core::network::{self, ParamGrad};
use deepfed_core::numerics::{streams, Matrix, RngStream};
use deepfed_core::probes;

fn runtime(e: deepfed_core::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn experiment_err(e: ExperimentError) -> PyErr {
    match e {
        ExperimentError::Config(c) => PyValueError::new_err(c.to_string()),
        ExperimentError::Run(e) => runtime(e),
    }
}

fn json_loads(py: Python<'_>, text: &str) -> PyResult<PyObject> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn to_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn parse_algo(name: &str) -> PyResult<Algo> {
    match name {
        "local_gd" => Ok(Algo::LocalGd),
        "local_sgd" => Ok(Algo::LocalSgd),
        other => Err(PyValueError::new_err(format!(
            "unknown algorithm {other:?}; expected \"local_gd\" or \"local_sgd\""
        ))),
    }
}

/// Architecture of a depth-L ReLU network with a fixed output layer.
#[pyclass(name = "NetConfig", module = "deepfed")]
#[derive(Clone)]
struct PyNetConfig {
    inner: network::NetConfig,
}

#[pymethods]
impl PyNetConfig {
    #[new]
    fn new(layers: usize, width: usize, input_dim: usize, output_dim: usize) -> PyResult<Self> {
        let inner = network::NetConfig::new(layers, width, input_dim, output_dim);
        inner.validate().map_err(runtime)?;
        Ok(Self { inner })
    }

    #[getter]
    fn layers(&self) -> usize {
        self.inner.layers
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "NetConfig(layers={}, width={}, input_dim={}, output_dim={})",
            c.layers, c.width, c.input_dim, c.output_dim
        )
    }
}

/// Unit-norm inputs with real-valued targets and optional class labels.
#[pyclass(name = "Dataset", module = "deepfed")]
#[derive(Clone)]
struct PyDataset {
    inner: data::Dataset,
}

impl PyDataset {
    fn shard(&self, indices: Option<Vec<usize>>) -> PyResult<Shard> {
        let indices = indices.unwrap_or_else(|| (0..self.inner.len()).collect());
        Shard::new(&self.inner, indices, 0).map_err(runtime)
    }
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (inputs, targets, labels=None))]
    fn new(
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        labels: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let inner = data::Dataset::new(inputs, targets, labels).map_err(runtime)?;
        Ok(Self { inner })
    }

    /// `n` points on the unit sphere in `d` dimensions, pairwise at least
    /// `phi` apart, labelled by a random linear teacher with `o` outputs.
    #[staticmethod]
    #[pyo3(signature = (n, d, o, phi, seed=0))]
    fn separable(n: usize, d: usize, o: usize, phi: f64, seed: u64) -> PyResult<Self> {
        let inner = data::gen_separable(n, d, o, phi, &mut RngStream::new(seed, streams::DATA))
            .map_err(runtime)?;
        Ok(Self { inner })
    }

    /// Loads an IDX image/label pair, dropping zero and duplicate images.
    #[staticmethod]
    #[pyo3(signature = (images, labels, limit=None))]
    fn from_idx(images: &str, labels: &str, limit: Option<usize>) -> PyResult<Self> {
        let load = data::load_idx(images, labels, limit).map_err(runtime)?;
        Ok(Self {
            inner: load.dataset,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn phi(&self) -> f64 {
        self.inner.phi()
    }

    #[getter]
    fn inputs(&self) -> Vec<Vec<f64>> {
        self.inner.inputs().to_vec()
    }

    #[getter]
    fn targets(&self) -> Vec<Vec<f64>> {
        self.inner.targets().to_vec()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<usize>> {
        self.inner.labels().map(<[usize]>::to_vec)
    }

    fn min_distance(&self) -> PyResult<f64> {
        data::min_pairwise_distance(&self.inner).map_err(runtime)
    }

    /// IID split into `k` near-equal shards; returns index lists.
    #[pyo3(signature = (k, seed=0))]
    fn partition_iid(&self, k: usize, seed: u64) -> PyResult<Vec<Vec<usize>>> {
        let part = data::partition_iid(
            &self.inner,
            k,
            &mut RngStream::new(seed, streams::PARTITION),
        )
        .map_err(runtime)?;
        Ok(part.assignments().to_vec())
    }

    /// Label-skewed split with `classes_per_client` classes per shard.
    #[pyo3(signature = (k, classes_per_client, seed=0))]
    fn partition_label_shards(
        &self,
        k: usize,
        classes_per_client: usize,
        seed: u64,
    ) -> PyResult<Vec<Vec<usize>>> {
        let part = data::partition_label_shards(
            &self.inner,
            k,
            classes_per_client,
            &mut RngStream::new(seed, streams::PARTITION),
        )
        .map_err(runtime)?;
        Ok(part.assignments().to_vec())
    }
}

/// Hidden weights `W_1..W_L` plus the shared fixed output layer `V`.
#[pyclass(name = "Params", module = "deepfed")]
#[derive(Clone)]
struct PyParams {
    inner: network::Params,
}

#[pymethods]
impl PyParams {
    /// Gaussian initialization from the `INIT` stream of `seed`.
    #[staticmethod]
    #[pyo3(signature = (net, seed=0))]
    fn init(net: &PyNetConfig, seed: u64) -> PyResult<Self> {
        let inner = network::init_params(&net.inner, &mut RngStream::new(seed, streams::INIT))
            .map_err(runtime)?;
        Ok(Self { inner })
    }

    /// Hidden matrices as nested row lists.
    fn hidden(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.hidden().iter().map(rows).collect()
    }

    fn output(&self) -> Vec<Vec<f64>> {
        rows(self.inner.output())
    }

    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(network::forward(&self.inner, &x).map_err(runtime)?.output)
    }

    /// `(1/n) Σ ½‖f(x) − y‖²` over `indices` (all examples when omitted).
    #[pyo3(signature = (dataset, indices=None))]
    fn loss(&self, dataset: &PyDataset, indices: Option<Vec<usize>>) -> PyResult<f64> {
        network::loss(&self.inner, &dataset.shard(indices)?).map_err(runtime)
    }

    /// Gradient with respect to each hidden matrix, as nested row lists.
    #[pyo3(signature = (dataset, indices=None))]
    fn gradient(
        &self,
        dataset: &PyDataset,
        indices: Option<Vec<usize>>,
    ) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let g = network::gradient(&self.inner, &dataset.shard(indices)?).map_err(runtime)?;
        Ok(g.layers.iter().map(rows).collect())
    }

    /// One gradient step `W ← W − η∇L` on `indices`.
    #[pyo3(signature = (eta, dataset, indices=None))]
    fn step(&mut self, eta: f64, dataset: &PyDataset, indices: Option<Vec<usize>>) -> PyResult<()> {
        let g: ParamGrad =
            network::gradient(&self.inner, &dataset.shard(indices)?).map_err(runtime)?;
        self.inner.descend(eta, &g).map_err(runtime)
    }

    /// Largest per-layer spectral norm of `self − other`.
    fn distance(&self, other: &PyParams) -> PyResult<f64> {
        let d =
            deepfed_core::numerics::tuple_ball_distance(self.inner.hidden(), other.inner.hidden())
                .map_err(runtime)?;
        Ok(d.max)
    }
}

/// Checks a JSON config and returns its resolved form as a dict.
#[pyfunction]
fn validate_config(py: Python<'_>, config: &str) -> PyResult<PyObject> {
    let raw: serde_json::Value =
        serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let cfg =
        experiment::validate_config(&raw).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_loads(py, &cfg.to_json())
}

fn parse_config(config: &str) -> PyResult<experiment::ExperimentConfig> {
    let raw: serde_json::Value =
        serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    experiment::validate_config(&raw).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Trains from a JSON config without writing files. Returns
/// `(summary, metrics_csv)`.
#[pyfunction]
fn execute(py: Python<'_>, config: &str) -> PyResult<(PyObject, String)> {
    let cfg = parse_config(config)?;
    let (log, summary, _) = py
        .allow_threads(|| experiment::execute(&cfg))
        .map_err(runtime)?;
    Ok((json_loads(py, &to_json(&summary)?)?, log.to_csv()))
}

/// Trains from a JSON config and writes the run directory. Returns the
/// summary dict.
#[pyfunction]
fn run_experiment(py: Python<'_>, config: &str) -> PyResult<PyObject> {
    let cfg = parse_config(config)?;
    let out = py
        .allow_threads(|| experiment::run_experiment(&cfg))
        .map_err(runtime)?;
    json_loads(py, &to_json(&out.summary)?)
}

/// Runs the config's sweep block. Returns the per-value rows as dicts.
#[pyfunction]
fn sweep(py: Python<'_>, config: &str) -> PyResult<PyObject> {
    let cfg = parse_config(config)?;
    let out = py
        .allow_threads(|| experiment::sweep(&cfg))
        .map_err(experiment_err)?;
    json_loads(py, &to_json(&out.rows)?)
}

/// Least-squares fit of `ln(loss)` against index.
#[pyfunction]
fn linear_rate_fit(py: Python<'_>, losses: Vec<f64>) -> PyResult<PyObject> {
    let fit = probes::linear_rate_fit(&losses).map_err(runtime)?;
    json_loads(py, &to_json(&fit)?)
}

/// Theorem step size for `algo` ("local_gd" or "local_sgd").
#[pyfunction]
#[pyo3(signature = (algo, net, n, phi, tau, c_eta=1.0))]
fn default_lr(
    algo: &str,
    net: &PyNetConfig,
    n: usize,
    phi: f64,
    tau: usize,
    c_eta: f64,
) -> PyResult<f64> {
    federated::default_lr(parse_algo(algo)?, &net.inner, n, phi, tau, c_eta).map_err(runtime)
}

#[pymodule]
fn deepfed(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyParams>()?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(execute, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(linear_rate_fit, m)?)?;
    m.add_function(wrap_pyfunction!(default_lr, m)?)?;
    Ok(())
}
