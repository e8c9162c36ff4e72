//! Python bindings. Images cross the boundary as flat `float` lists in
//! `[C, H, W]` order together with their shape.

use std::path::PathBuf;

use pii_core::eval::{inception_score_from_probs, write_png};
use pii_core::models::data::{load_dataset, Split};
use pii_core::models::toy::{random_handle, train, Arch, TrainConfig};
use pii_core::models::{load_model, save_model};
use pii_core::regularizers::{total_variation, total_variation_grad};
use pii_core::{config, ClassifierHandle, InversionConfig, InversionResult, PiiError, ScheduleMode, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(pii, Error, PyException, "Raised for every library failure; `kind` is the first word.");

fn err(e: PiiError) -> PyErr {
    Error::new_err(format!("{}: {e}", e.kind()))
}

fn tensor(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(err)
}

/// Inversion settings, edited through the same keys as config files.
#[pyclass(name = "Config")]
struct PyConfig {
    inner: InversionConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, optionally overridden by `key = value` text.
    #[new]
    #[pyo3(signature = (text=None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => InversionConfig::from_text(t).map_err(err)?,
            None => InversionConfig::default(),
        };
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    /// Raises with every violated invariant listed.
    fn validate(&self) -> PyResult<()> {
        config::validate_config(self.inner.clone()).map(|_| ()).map_err(err)
    }

    fn total_iterations(&self) -> PyResult<usize> {
        self.inner.total_iterations().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Config({:?})", self.inner.to_text())
    }
}

/// A frozen classifier.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: ClassifierHandle,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(dir: PathBuf, name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_model(&dir, name).map_err(err)?.0,
        })
    }

    /// Untrained weights, handy for smoke tests.
    #[staticmethod]
    #[pyo3(signature = (arch, num_classes=10, seed=0))]
    fn random(arch: &str, num_classes: usize, seed: u64) -> PyResult<Self> {
        let arch: Arch = arch.parse().map_err(err)?;
        Ok(Self {
            inner: random_handle(arch, num_classes, seed).map_err(err)?,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn has_bn_stats(&self) -> bool {
        self.inner.has_bn_stats()
    }

    /// Class probabilities for one `[C, H, W]` image.
    #[pyo3(signature = (data, shape, normalize=true))]
    fn probabilities(&self, data: Vec<f64>, shape: Vec<usize>, normalize: bool) -> PyResult<Vec<f64>> {
        let mut batch_shape = vec![1];
        batch_shape.extend(shape);
        let x = tensor(data, batch_shape)?;
        let mut p = self.inner.probabilities(&x, normalize).map_err(err)?;
        Ok(p.remove(0))
    }

    /// Runs the full staged inversion. The GIL is released meanwhile.
    fn invert(&self, py: Python<'_>, config: &PyConfig) -> PyResult<PyInversion> {
        let cfg = config.inner.clone();
        let handle = self.inner.clone();
        let r = py.detach(move || pii_core::invert(&handle, &cfg)).map_err(err)?;
        Ok(PyInversion { inner: r })
    }
}

/// Output of `Model.invert`.
#[pyclass(name = "InversionResult", frozen)]
struct PyInversion {
    inner: InversionResult,
}

#[pymethods]
impl PyInversion {
    #[getter]
    fn image(&self) -> Vec<f64> {
        self.inner.image.pixels().data().to_vec()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.image.pixels().shape().to_vec()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// `(stage, iteration, lr, nll, tv, l2, total)` per step.
    #[getter]
    fn trace(&self) -> Vec<(usize, usize, f64, f64, f64, f64, f64)> {
        self.inner
            .loss_trace
            .iter()
            .map(|r| (r.stage, r.iteration, r.lr, r.nll, r.tv, r.l2, r.total))
            .collect()
    }

    fn save_png(&self, path: PathBuf) -> PyResult<()> {
        write_png(&path, self.inner.image.pixels()).map_err(err)
    }
}

/// Trains a toy classifier on the generated shapes set and saves it;
/// returns the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (arch, dir, name, seed=0, epochs=8, train_size=3000, test_size=1000))]
#[allow(clippy::too_many_arguments)]
fn train_toy(
    py: Python<'_>,
    arch: &str,
    dir: PathBuf,
    name: &str,
    seed: u64,
    epochs: usize,
    train_size: usize,
    test_size: usize,
) -> PyResult<String> {
    let arch: Arch = arch.parse().map_err(err)?;
    let name = name.to_string();
    py.detach(move || {
        let tr = load_dataset("shapes10", Split::Train, train_size, 0, None)?;
        let te = load_dataset("shapes10", Split::Test, test_size, 0, None)?;
        let cfg = TrainConfig {
            epochs,
            seed,
            ..Default::default()
        };
        let trained = train(arch, &tr, &te, &cfg)?;
        let manifest = save_model(&dir, &name, &trained, "shapes10", &tr.class_names, &cfg)?;
        serde_json::to_string(&manifest).map_err(|e| PiiError::Format(e.to_string()))
    })
    .map_err(err)
}

/// `(initial_resolution, [(upsample_to, pad_to), ...])`.
#[pyfunction]
#[pyo3(signature = (resolution, n_stages, mode="zoom_and_center"))]
fn plan_stages(resolution: usize, n_stages: usize, mode: &str) -> PyResult<(usize, Vec<(usize, usize)>)> {
    let mode: ScheduleMode = mode.parse().map_err(err)?;
    let plan = pii_core::plan_stages(resolution, n_stages, mode).map_err(err)?;
    Ok((
        plan.initial_resolution,
        plan.stages.iter().map(|s| (s.upsample_to, s.pad_to)).collect(),
    ))
}

#[pyfunction(name = "total_variation")]
fn py_total_variation(data: Vec<f64>, shape: Vec<usize>) -> PyResult<f64> {
    total_variation(&tensor(data, shape)?).map_err(err)
}

/// `(value, flat gradient)`.
#[pyfunction(name = "total_variation_grad")]
fn py_total_variation_grad(data: Vec<f64>, shape: Vec<usize>) -> PyResult<(f64, Vec<f64>)> {
    let (v, g) = total_variation_grad(&tensor(data, shape)?).map_err(err)?;
    Ok((v, g.into_data()))
}

/// `(mean, std)` over `splits` equal chunks of predictive distributions.
#[pyfunction]
#[pyo3(signature = (probs, splits=1))]
fn inception_score(probs: Vec<Vec<f64>>, splits: usize) -> PyResult<(f64, f64)> {
    inception_score_from_probs(&probs, splits).map_err(err)
}

#[pyfunction]
fn cosine_lr(iteration: usize, total: usize, lr0: f64) -> PyResult<f64> {
    pii_core::cosine_lr(iteration, total, lr0).map_err(err)
}

#[pymodule]
fn pii(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("Error", m.py().get_type::<Error>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyInversion>()?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    m.add_function(wrap_pyfunction!(plan_stages, m)?)?;
    m.add_function(wrap_pyfunction!(py_total_variation, m)?)?;
    m.add_function(wrap_pyfunction!(py_total_variation_grad, m)?)?;
    m.add_function(wrap_pyfunction!(inception_score, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    Ok(())
}
