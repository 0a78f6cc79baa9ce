//! Python bindings for `unsq`.
//!
//! Tensors cross the boundary as a flat list of floats plus an
//! `(n, c, h, w)` shape tuple.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;

use unsq::data::{generate_synthetic, load_dataset, Dataset, SynthConfig};
use unsq::distill::compute_class_weight;
use unsq::gradcheck::{battery, BatteryConfig};
use unsq::layers::{
    soft_cross_entropy_parts, softmax_temperature_tensor, weighted_cross_entropy_parts, ClassWeights,
};
use unsq::metrics::{iou as iou_metric, mask_from_logits};
use unsq::unet::{count_params_with, load_checkpoint, save_checkpoint, ParamCountMode, UnetConfig};
use unsq::{Error, Shape, Tensor};

type Dims = (usize, usize, usize, usize);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::MissingFile(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(values: Vec<f64>, shape: Dims) -> PyResult<Tensor> {
    Tensor::new(Shape::new(shape.0, shape.1, shape.2, shape.3), values).map_err(to_py)
}

fn dims(t: &Tensor) -> Dims {
    let s = t.shape();
    (s.n, s.c, s.h, s.w)
}

fn count_mode(mode: &str) -> PyResult<ParamCountMode> {
    mode.parse().map_err(to_py)
}

/// Trainable parameter count of the U-net with starting depth `depth`.
#[pyfunction]
#[pyo3(signature = (depth, mode = "plain", batch_norm = false))]
fn count_params(depth: usize, mode: &str, batch_norm: bool) -> PyResult<usize> {
    let cfg = UnetConfig::new(depth).with_batch_norm(batch_norm);
    cfg.validate().map_err(to_py)?;
    Ok(count_params_with(&cfg, count_mode(mode)?))
}

/// Two-class softmax of `logits / t`.
#[pyfunction]
fn softmax_temperature(logits: Vec<f64>, shape: Dims, t: f64) -> PyResult<Vec<f64>> {
    Ok(softmax_temperature_tensor(&tensor(logits, shape)?, t)
        .map_err(to_py)?
        .into_data())
}

/// Class-weighted hard cross-entropy; returns `(loss, grad)`.
#[pyfunction]
#[pyo3(signature = (logits, shape, targets, w_f = 1.0, w_b = 1.0))]
fn weighted_cross_entropy(
    logits: Vec<f64>,
    shape: Dims,
    targets: Vec<f64>,
    w_f: f64,
    w_b: f64,
) -> PyResult<(f64, Vec<f64>)> {
    let z = tensor(logits, shape)?;
    let y = tensor(targets, (shape.0, 1, shape.2, shape.3))?;
    let w = ClassWeights::new(w_f, w_b).map_err(to_py)?;
    let (l, g) = weighted_cross_entropy_parts(&z, &y, w).map_err(to_py)?;
    Ok((l, g.into_data()))
}

/// Soft cross-entropy against teacher probabilities; returns `(loss, grad)`.
#[pyfunction]
#[pyo3(signature = (logits, shape, teacher, t, w_f = 1.0, w_b = 1.0))]
fn soft_cross_entropy(
    logits: Vec<f64>,
    shape: Dims,
    teacher: Vec<f64>,
    t: f64,
    w_f: f64,
    w_b: f64,
) -> PyResult<(f64, Vec<f64>)> {
    let z = tensor(logits, shape)?;
    let q = tensor(teacher, shape)?;
    let w = ClassWeights::new(w_f, w_b).map_err(to_py)?;
    let (l, g) = soft_cross_entropy_parts(&z, &q, t, w).map_err(to_py)?;
    Ok((l, g.into_data()))
}

/// Pooled foreground IoU of two binary masks given as flat lists.
#[pyfunction]
fn iou(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    let (np, nt) = (pred.len(), truth.len());
    let p = tensor(pred, (1, 1, 1, np))?;
    let t = tensor(truth, (1, 1, 1, nt))?;
    iou_metric(&p, &t).map_err(to_py)
}

/// Writes a synthetic dataset; returns the train and test manifest paths.
#[pyfunction]
#[pyo3(signature = (out, num_train = 32, num_test = 16, size = 64, foreground_fraction = 1.0 / 18.8, noise_std = 0.1, seed = 0))]
fn generate_dataset(
    out: PathBuf,
    num_train: usize,
    num_test: usize,
    size: usize,
    foreground_fraction: f64,
    noise_std: f64,
    seed: u64,
) -> PyResult<(String, String)> {
    let cfg = SynthConfig {
        num_train,
        num_test,
        height: size,
        width: size,
        foreground_fraction,
        noise_std,
        seed,
        ..Default::default()
    };
    let ds = generate_synthetic(&cfg, out).map_err(to_py)?;
    Ok((
        ds.train.path().display().to_string(),
        ds.test.path().display().to_string(),
    ))
}

/// Loads a split: `(images, masks, shape)`.
#[pyfunction]
fn load_split(manifest: PathBuf) -> PyResult<(Vec<f64>, Vec<f64>, Dims)> {
    let d: Dataset = load_dataset(manifest).map_err(to_py)?;
    let shape = dims(&d.images);
    Ok((d.images.into_data(), d.masks.into_data(), shape))
}

/// Background/foreground pixel ratio of a split.
#[pyfunction]
fn class_weight(manifest: PathBuf) -> PyResult<f64> {
    let m = unsq::data::DatasetManifest::read(manifest).map_err(to_py)?;
    Ok(compute_class_weight(&m).map_err(to_py)?.w_f)
}

/// Runs the gradient battery: `(checks, failures, max_relative_error)`.
#[pyfunction]
#[pyo3(signature = (seeds = 1))]
fn grad_check(seeds: u64) -> PyResult<(usize, usize, f64)> {
    let results = battery(&BatteryConfig {
        seeds,
        ..Default::default()
    })
    .map_err(to_py)?;
    let failed = results.iter().filter(|r| !r.report.pass).count();
    let worst = results
        .iter()
        .map(|r| r.report.max_relative_error)
        .fold(0.0, f64::max);
    Ok((results.len(), failed, worst))
}

/// A U-net in 64-bit precision.
#[pyclass(name = "UnetModel")]
struct PyUnet {
    inner: unsq::unet::UnetModel<f64>,
}

#[pymethods]
impl PyUnet {
    #[new]
    #[pyo3(signature = (depth, batch_norm = false, seed = 1))]
    fn new(depth: usize, batch_norm: bool, seed: u64) -> PyResult<Self> {
        let cfg = UnetConfig::new(depth).with_batch_norm(batch_norm);
        Ok(Self {
            inner: unsq::unet::UnetModel::build(&cfg, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.config().start_channels
    }

    #[pyo3(signature = (mode = "plain"))]
    fn param_count(&self, mode: &str) -> PyResult<usize> {
        Ok(self.inner.enumerate_params(count_mode(mode)?))
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    /// Eval-mode logits `(values, shape)` for images of shape `(n, 1, h, w)`.
    fn predict_logits(&self, images: Vec<f64>, shape: Dims) -> PyResult<(Vec<f64>, Dims)> {
        let x = tensor(images, shape)?;
        let z = self.inner.predict_logits(&x, 8).map_err(to_py)?;
        let d = dims(&z);
        Ok((z.into_data(), d))
    }

    /// Binary masks from the argmax of the logits.
    fn predict_mask(&self, images: Vec<f64>, shape: Dims) -> PyResult<Vec<f64>> {
        let x = tensor(images, shape)?;
        let z = self.inner.predict_logits(&x, 8).map_err(to_py)?;
        Ok(mask_from_logits(&z).map_err(to_py)?.into_data())
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "UnetModel(depth={}, batch_norm={}, params={})",
            c.start_channels,
            c.batch_norm_contracting,
            self.inner.enumerate_params(ParamCountMode::Plain)
        )
    }
}

#[pymodule]
fn unsq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyUnet>()?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_temperature, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(soft_cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_split, m)?)?;
    m.add_function(wrap_pyfunction!(class_weight, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
