//! Python bindings: run configs, training, checkpoint evaluation, model
//! forward passes and routing-log diagnostics.

use std::path::PathBuf;

use moelab::diagnostics::{self, LayerValues};
use moelab::model::{count_params, forward_lm, ModelConfig};
use moelab::moe::{Perturbation, RouteOptions};
use moelab::numeric::{ParamStore, Tensor};
use moelab::trainer::{self, load_checkpoint, EvalOptions, Split, TrainOptions};
use moelab::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Dimension(_) | Error::Alignment(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn layer_values<'py>(py: Python<'py>, v: LayerValues) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("layers", v.layers)?;
    d.set_item("per_layer", v.per_layer)?;
    d.set_item("aggregate", v.aggregate)?;
    Ok(d)
}

fn route_options(temperature: Option<f32>, perturbation: Option<&str>) -> PyResult<RouteOptions> {
    let perturbation = perturbation.map(Perturbation::parse).transpose().map_err(py_err)?;
    Ok(RouteOptions { temperature, perturbation })
}

/// A training run configuration.
#[pyclass(name = "RunConfig", module = "moelab_py")]
struct PyRunConfig {
    inner: trainer::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Defaults, or the given TOML text.
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => trainer::RunConfig::from_toml(t).map_err(py_err)?,
            None => trainer::RunConfig::default(),
        };
        Ok(PyRunConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRunConfig { inner: trainer::RunConfig::load(&path).map_err(py_err)? })
    }

    /// A copy with `key=value` overrides applied, e.g. `"model.moe.top_k=1"`.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyRunConfig { inner: self.inner.with_overrides(&overrides).map_err(py_err)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.model.moe.variant.name()
    }

    #[getter]
    fn total_steps(&self) -> usize {
        self.inner.total_steps
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(variant={}, steps={}, hash={})", self.variant(), self.inner.total_steps, &self.inner.hash()[..12])
    }
}

/// Train `config` into the directory `out` and return the run summary.
#[pyfunction]
#[pyo3(signature = (config, out, force=false, quiet=true))]
fn train<'py>(py: Python<'py>, config: &PyRunConfig, out: PathBuf, force: bool, quiet: bool) -> PyResult<Bound<'py, PyDict>> {
    let s = trainer::train(&config.inner, &out, &TrainOptions { force, quiet }).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("config_hash", s.config_hash)?;
    d.set_item("steps", s.steps)?;
    d.set_item("final_val_ppl", s.final_val_ppl)?;
    d.set_item("checkpoints", s.checkpoints)?;
    d.set_item("total_params", s.params.total)?;
    d.set_item("active_params", s.params.active)?;
    d.set_item("elapsed_secs", s.elapsed_secs)?;
    Ok(d)
}

/// Perplexity of a checkpoint directory on its run's `"val"` or `"train"` split.
#[pyfunction]
#[pyo3(signature = (checkpoint, split="val", temperature=None, perturbation=None, max_windows=0))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    split: &str,
    temperature: Option<f32>,
    perturbation: Option<&str>,
    max_windows: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let split = match split {
        "val" => Split::Val,
        "train" => Split::Train,
        other => return Err(PyValueError::new_err(format!("unknown split `{other}`"))),
    };
    let opts = EvalOptions { route: route_options(temperature, perturbation)?, max_windows, ..EvalOptions::default() };
    let (_, r) = trainer::evaluate_checkpoint(&checkpoint, split, &opts).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("ppl", r.ppl)?;
    d.set_item("mean_ce", r.mean_ce)?;
    d.set_item("n_tokens", r.n_tokens)?;
    Ok(d)
}

/// Model parameters with their architecture.
#[pyclass(name = "Model", module = "moelab_py")]
struct PyModel {
    params: ParamStore,
    cfg: ModelConfig,
}

#[pymethods]
impl PyModel {
    /// Freshly initialised parameters for `config` (its seed and init mode).
    #[staticmethod]
    fn init(config: &PyRunConfig) -> PyResult<Self> {
        let params = trainer::initial_params(&config.inner).map_err(py_err)?;
        Ok(PyModel { params, cfg: config.inner.model.clone() })
    }

    /// Parameters from a checkpoint directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(py_err)?;
        Ok(PyModel { cfg: ck.manifest.run_config.model.clone(), params: ck.params })
    }

    /// `(total, active)` parameter counts.
    fn n_params(&self) -> (usize, usize) {
        let c = count_params(&self.params, &self.cfg);
        (c.total, c.active)
    }

    fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    /// Next-byte logits, one row per input token. `tokens` holds `batch`
    /// equal-length sequences back to back.
    #[pyo3(signature = (tokens, batch=1, temperature=None, perturbation=None))]
    fn logits(
        &self,
        tokens: Vec<usize>,
        batch: usize,
        temperature: Option<f32>,
        perturbation: Option<&str>,
    ) -> PyResult<Vec<Vec<f32>>> {
        let route = route_options(temperature, perturbation)?;
        let out = forward_lm(&self.params, &self.cfg, &tokens, batch, &route).map_err(py_err)?;
        Ok(rows(&out.logits))
    }
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    let c = t.shape()[1];
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

/// A routing log read from disk.
#[pyclass(name = "RoutingLog", module = "moelab_py")]
struct PyRoutingLog {
    inner: diagnostics::RoutingLog,
}

#[pymethods]
impl PyRoutingLog {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PyRoutingLog { inner: diagnostics::RoutingLog::read(&path).map_err(py_err)? })
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.header.n_layers
    }

    #[getter]
    fn n_experts(&self) -> usize {
        self.inner.header.n_experts
    }

    #[getter]
    fn top_k(&self) -> usize {
        self.inner.header.top_k
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.header.variant.name()
    }

    #[getter]
    fn step(&self) -> usize {
        self.inner.header.checkpoint_step
    }

    fn __len__(&self) -> usize {
        self.inner.rows.len()
    }

    /// Selected expert ids for every row, in log order.
    fn selections(&self) -> Vec<Vec<usize>> {
        self.inner.rows.iter().map(|r| r.selected_ids.clone()).collect()
    }

    fn eae<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        layer_values(py, diagnostics::eae_log(&self.inner).map_err(py_err)?)
    }

    fn ewa<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        layer_values(py, diagnostics::ewa_log(&self.inner).map_err(py_err)?)
    }

    fn margin<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        layer_values(py, diagnostics::router_margin(&self.inner).map_err(py_err)?)
    }

    /// Share of tokens whose selected set differs from `other`'s.
    #[pyo3(signature = (other, fractional=false))]
    fn change_rate<'py>(&self, py: Python<'py>, other: &PyRoutingLog, fractional: bool) -> PyResult<Bound<'py, PyDict>> {
        layer_values(py, diagnostics::expert_change_rate(&self.inner, &other.inner, fractional).map_err(py_err)?)
    }

    /// Top-`k` overlap with the selections of `final_log`.
    fn saturation<'py>(&self, py: Python<'py>, final_log: &PyRoutingLog, k: usize) -> PyResult<Bound<'py, PyDict>> {
        layer_values(py, diagnostics::router_saturation(&self.inner, &final_log.inner, k).map_err(py_err)?)
    }

    /// Co-activation matrix, pooled over layers unless `layer` is given.
    #[pyo3(signature = (layer=None))]
    fn eca(&self, layer: Option<usize>) -> Vec<Vec<f64>> {
        diagnostics::eca(&self.inner, layer).values
    }
}

/// Switch-style balance loss `α·N·Σ f_i·P_i` of router logits and selections.
#[pyfunction]
fn balance_loss(logits: Vec<Vec<f64>>, ids: Vec<Vec<usize>>, alpha: f64) -> PyResult<f64> {
    let n = logits.first().map_or(0, |r| r.len());
    let t = Tensor::new(vec![logits.len(), n], logits.concat()).map_err(py_err)?;
    Ok(moelab::moe::balance_loss(&t, &ids, alpha).map_err(py_err)?.balance_loss)
}

/// Names of the routing variants.
#[pyfunction]
fn variants() -> Vec<&'static str> {
    moelab::moe::Variant::SPARSE.iter().map(|v| v.name()).chain(["dense"]).collect()
}

#[pymodule]
fn moelab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyRoutingLog>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(balance_loss, m)?)?;
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    Ok(())
}
