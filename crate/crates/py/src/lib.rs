//! Python bindings: tensors, configurations, models, metrics, checkpoints,
//! energy profiling and the command runners.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use spikeir::commands;
use spikeir::config::{self, RunConfig};
use spikeir::energy::{profile_ann, profile_snn, EnergyConstants};
use spikeir::model::{self, ModelGraph, NetKind};
use spikeir::{checkpoint, data, metrics, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Rank-4 float tensor `[n, c, h, w]`.
/// Restored image, mean firing rate and per-layer firing rates.
type ForwardOutput = (PyTensor, f32, Vec<(String, f32)>);

#[pyclass(name = "Tensor", module = "spikeir_py", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    pub inner: spikeir::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: [usize; 4], data: Vec<f32>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: spikeir::Tensor::new(shape, data).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: [usize; 4]) -> Self {
        PyTensor {
            inner: spikeir::Tensor::zeros(shape),
        }
    }

    #[getter]
    fn shape(&self) -> [usize; 4] {
        self.inner.shape()
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Run configuration (`key = value` text).
#[pyclass(name = "RunConfig", module = "spikeir_py", from_py_object)]
#[derive(Clone)]
pub struct PyRunConfig {
    pub inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: config::parse_config(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: config::load_config(path).map_err(py_err)?,
        })
    }

    /// Override one key, with the same rules as the file format.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.apply_override(key, value).map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn sigma(&self) -> u32 {
        self.inner.sigma
    }

    #[getter]
    fn timesteps(&self) -> usize {
        self.inner.student.timesteps
    }
}

/// A student (spiking) or teacher (analog) network.
#[pyclass(name = "Model", module = "spikeir_py")]
pub struct PyModel {
    pub inner: ModelGraph,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn student(cfg: &PyRunConfig) -> PyResult<Self> {
        Ok(PyModel {
            inner: model::build_student(&cfg.inner.student, cfg.inner.seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn teacher(cfg: &PyRunConfig) -> PyResult<Self> {
        Ok(PyModel {
            inner: model::build_teacher(&cfg.inner.teacher_config(), cfg.inner.seed)
                .map_err(py_err)?,
        })
    }

    #[getter]
    fn spiking(&self) -> bool {
        matches!(self.inner.net, NetKind::Spiking { .. })
    }

    fn parameter_count(&self) -> usize {
        self.inner.params().scalar_count()
    }

    /// Restored image, mean firing rate and per-layer rates.
    fn forward(&self, py: Python<'_>, image: &PyTensor) -> PyResult<ForwardOutput> {
        let out = py
            .detach(|| self.inner.forward(&image.inner))
            .map_err(py_err)?;
        Ok((
            PyTensor {
                inner: out.restored,
            },
            out.stats.mean_firing_rate(),
            out.stats.firing_rates,
        ))
    }

    fn save(&self, path: &str, config_text: &str) -> PyResult<()> {
        checkpoint::save_checkpoint(&self.inner, config_text, path).map_err(py_err)
    }

    fn load(&mut self, path: &str) -> PyResult<()> {
        checkpoint::restore(&mut self.inner, path)
            .map(|_| ())
            .map_err(py_err)
    }
}

#[pyfunction]
fn psnr(a: &PyTensor, b: &PyTensor) -> PyResult<f64> {
    metrics::psnr(&a.inner, &b.inner).map_err(py_err)
}

#[pyfunction]
fn ssim(a: &PyTensor, b: &PyTensor) -> PyResult<f64> {
    metrics::ssim(&a.inner, &b.inner).map_err(py_err)
}

/// Procedural test image `[1, channels, size, size]` in [0, 1].
#[pyfunction]
fn synthetic_image(channels: usize, size: usize, seed: u64) -> PyTensor {
    PyTensor {
        inner: data::synthetic_image(channels, size, size, seed).to_tensor(),
    }
}

/// Add Gaussian noise of `sigma` on the 0-255 scale and clip to [0, 1].
#[pyfunction]
fn add_gaussian_noise(image: &PyTensor, sigma: f32, seed: u64) -> PyResult<PyTensor> {
    let img = data::ImageBuffer::from_tensor(&image.inner).map_err(py_err)?;
    Ok(PyTensor {
        inner: data::add_gaussian_noise(&img, sigma, seed)
            .map_err(py_err)?
            .to_tensor(),
    })
}

/// Energy of `student` over `samples` against `teacher` on the first
/// sample, as a JSON summary.
#[pyfunction]
fn energy_summary(
    py: Python<'_>,
    student: &PyModel,
    teacher: &PyModel,
    samples: Vec<PyTensor>,
) -> PyResult<String> {
    let samples: Vec<spikeir::Tensor> = samples.into_iter().map(|t| t.inner).collect();
    let first = samples
        .first()
        .ok_or_else(|| PyValueError::new_err("at least one sample is required"))?;
    let k = EnergyConstants::default();
    py.detach(|| {
        let ann = profile_ann(&teacher.inner, first, &k)?;
        Ok(profile_snn(&student.inner, &samples, &k)?
            .with_ann(&ann)
            .summary_json())
    })
    .map_err(py_err)
}

/// Run a command by its command-line name and return its summary text.
#[pyfunction]
fn run_command(py: Python<'_>, name: &str, cfg: &PyRunConfig) -> PyResult<String> {
    let cfg = &cfg.inner;
    let out = py
        .detach(|| -> spikeir::Result<commands::CommandOutput> {
            Ok(match name {
                "train-teacher" => commands::cmd_train_teacher(cfg)?.output,
                "train-student" => commands::cmd_train_student(cfg)?.output,
                "eval" => commands::cmd_eval(cfg)?.0,
                "profile" => commands::cmd_profile(cfg)?.0,
                "sweep-stages" => commands::cmd_sweep_stages(cfg)?.output,
                "denoise" => commands::cmd_denoise(cfg)?,
                other => return Err(Error::Config(format!("unknown command '{other}'"))),
            })
        })
        .map_err(py_err)?;
    Ok(out.summary)
}

#[pymodule]
pub fn spikeir_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_image, m)?)?;
    m.add_function(wrap_pyfunction!(add_gaussian_noise, m)?)?;
    m.add_function(wrap_pyfunction!(energy_summary, m)?)?;
    m.add_function(wrap_pyfunction!(run_command, m)?)?;
    Ok(())
}
