//! Python bindings: tensors as flat `f32` buffers plus a shape, LKCA
//! layers, models, checkpoints and the training loop.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lkca_core::autodiff::grad_check;
use lkca_core::checkpoint;
use lkca_core::config;
use lkca_core::lkca::{self as core_lkca, unroll_kernel_to_attention, KernelInit, LkcaKernel, View};
use lkca_core::model::{ModelConfig, ModelLossTarget, VisionModel};
use lkca_core::train;
use lkca_core::{Error, SeededRng};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Dimension(_) | Error::InvalidArgument(_) | Error::Config(_) | Error::Checkpoint(_) | Error::Idx { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| PyValueError::new_err(e.to_string()))
}

/// Dense row-major `f32` tensor.
#[pyclass(name = "Tensor", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: lkca_core::Tensor<f32>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: lkca_core::Tensor::new(shape, data).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self {
            inner: lkca_core::Tensor::zeros(shape),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (shape, seed=0, std=1.0))]
    fn randn(shape: Vec<usize>, seed: u64, std: f64) -> PyResult<Self> {
        let mut rng = SeededRng::new(seed);
        Ok(Self {
            inner: lkca_core::tensor::rand_normal(&mut rng, shape, 0.0, std).map_err(to_py)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> PyResult<f32> {
        self.inner.max_abs_diff(&other.inner).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn wrap(t: lkca_core::Tensor<f32>) -> PyTensor {
    PyTensor { inner: t }
}

/// One LKCA token mixer on a `grid_h × grid_w` token grid.
#[pyclass(name = "LkcaLayer")]
pub struct PyLkcaLayer {
    inner: core_lkca::LkcaLayer<f32>,
}

#[pymethods]
impl PyLkcaLayer {
    #[new]
    #[pyo3(signature = (grid_h, grid_w, dim, seed=0, init="trunc_normal", view="convolution"))]
    fn new(grid_h: usize, grid_w: usize, dim: usize, seed: u64, init: &str, view: &str) -> PyResult<Self> {
        let mut rng = SeededRng::new(seed);
        let init: KernelInit = parse(init)?;
        let view: View = parse(view)?;
        Ok(Self {
            inner: core_lkca::LkcaLayer::init(grid_h, grid_w, dim, init, view, &mut rng).map_err(to_py)?,
        })
    }

    #[getter]
    fn view(&self) -> &'static str {
        self.inner.view.as_str()
    }

    #[setter]
    fn set_view(&mut self, view: &str) -> PyResult<()> {
        self.inner.view = parse(view)?;
        Ok(())
    }

    #[getter]
    fn kernel(&self) -> PyTensor {
        wrap(self.inner.kernel.weights().clone())
    }

    #[setter]
    fn set_kernel(&mut self, kernel: PyTensor) -> PyResult<()> {
        let (gh, gw) = self.inner.kernel.grid();
        self.inner.kernel = LkcaKernel::new(gh, gw, kernel.inner).map_err(to_py)?;
        Ok(())
    }

    /// `[b, N, d] -> [b, N, d]`.
    fn forward(&self, x: &PyTensor) -> PyResult<PyTensor> {
        self.inner.forward(&x.inner).map(wrap).map_err(to_py)
    }

    /// The unrolled `N × N` score matrix.
    fn attention_matrix(&self) -> PyTensor {
        wrap(unroll_kernel_to_attention(&self.inner.kernel).scores)
    }

    /// Dict of gradients keyed `x`, `kernel`, `value_weight`, `value_bias`.
    fn backward<'py>(&self, py: Python<'py>, x: &PyTensor, grad_out: &PyTensor) -> PyResult<Bound<'py, PyDict>> {
        let g = core_lkca::backward(&x.inner, &self.inner, &grad_out.inner).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("x", wrap(g.x))?;
        d.set_item("kernel", wrap(g.kernel))?;
        d.set_item("value_weight", wrap(g.value_weight))?;
        d.set_item("value_bias", wrap(g.value_bias))?;
        Ok(d)
    }

    fn count_params(&self) -> u64 {
        core_lkca::count_params(&self.inner)
    }

    fn count_flops(&self, batch: usize) -> u64 {
        core_lkca::count_flops(&self.inner, batch)
    }
}

fn model_config(path: &str) -> PyResult<(ModelConfig, u64)> {
    let cfg = config::load(path).map_err(to_py)?;
    Ok((cfg.train.model.clone(), cfg.train.seed))
}

/// The classifier described by a key=value config file.
#[pyclass(name = "Model")]
pub struct PyModel {
    inner: VisionModel<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed=None))]
    fn new(config: &str, seed: Option<u64>) -> PyResult<Self> {
        let (cfg, default_seed) = model_config(config)?;
        Ok(Self {
            inner: VisionModel::init(&cfg, seed.unwrap_or(default_seed)).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(config: &str, checkpoint: &str) -> PyResult<Self> {
        let (cfg, _) = model_config(config)?;
        Ok(Self {
            inner: checkpoint::load(&cfg, checkpoint).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, path).map_err(to_py)
    }

    /// `[b, H, W, C]` images to `[b, classes]` logits.
    fn forward(&self, images: &PyTensor) -> PyResult<PyTensor> {
        self.inner.forward(&images.inner).map(wrap).map_err(to_py)
    }

    fn set_view(&mut self, view: &str) -> PyResult<()> {
        self.inner.set_view(parse(view)?).map_err(to_py)
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.registry().into_iter().map(|(n, _)| n).collect()
    }

    fn parameter(&self, name: &str) -> PyResult<PyTensor> {
        self.inner
            .registry()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| wrap(t.clone()))
            .ok_or_else(|| PyValueError::new_err(format!("no parameter named {name:?}")))
    }

    fn param_count(&self) -> u64 {
        lkca_core::model::count_model_params(&self.inner)
    }
}

/// Trains per the config, writes metrics and a checkpoint under `out`,
/// and returns one dict per step.
#[pyfunction(name = "train")]
fn train_py<'py>(py: Python<'py>, config: &str, out: PathBuf) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = config::load(config).map_err(to_py)?;
    let outcome = py.detach(|| train::train_loop(&cfg.train, &out)).map_err(to_py)?;
    outcome
        .history
        .steps
        .iter()
        .map(|m| {
            let d = PyDict::new(py);
            d.set_item("step", m.step)?;
            d.set_item("lr", m.lr)?;
            d.set_item("loss", m.loss)?;
            d.set_item("train_acc", m.train_acc)?;
            d.set_item("test_acc", m.test_acc)?;
            Ok(d)
        })
        .collect()
}

/// `(passed, max_rel_error)` of the full-model gradient check.
#[pyfunction(name = "grad_check")]
#[pyo3(signature = (config, tolerance=1e-5))]
fn grad_check_py(config: &str, tolerance: f64) -> PyResult<(bool, f64)> {
    let cfg = config::load(config).map_err(to_py)?;
    let (data, _) = cfg.train.datasets::<f64>().map_err(to_py)?;
    let (images, labels) = data.batch(&[0, 1.min(data.len() - 1)]);
    let target = ModelLossTarget {
        model: VisionModel::init(&cfg.train.model, cfg.train.seed).map_err(to_py)?,
        images,
        labels,
        smoothing: cfg.train.label_smoothing,
        fault: None,
    };
    let report = grad_check(&target, tolerance).map_err(to_py)?;
    Ok((report.passed(), report.max_rel_error()))
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyLkcaLayer>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train_py, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check_py, m)?)?;
    Ok(())
}

#[pymodule]
fn lkca(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
