//! Python bindings: images, synthetic corpora, degradation, models, training
//! and fusion-quality metrics.

use std::collections::BTreeMap;
use std::path::PathBuf;

use defusion_core::degradation::{apply_degradation, decomposition_targets, sample_mask_pair};
use defusion_core::fusion::{self, DecompositionVisual, FusionMode, FusionRequest};
use defusion_core::imaging::{self, ColorMode, SceneImage};
use defusion_core::metrics::{self, Task};
use defusion_core::model::{DeFusionModel, ModelConfig};
use defusion_core::trainer::{self, Ablation, TrainConfig, Trainer};
use defusion_core::{synthetic, Error};
use ndarray::Array3;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Decode { .. } | Error::Format { .. } => PyOSError::new_err(e.to_string()),
        Error::Contract(_) | Error::Param(_) | Error::Config(_) | Error::Data(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for defusion_core::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// An `(H, W, C)` image with values in `[0, 1]`.
#[pyclass(name = "Image", module = "defusion", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyImage {
    inner: SceneImage,
}

impl From<SceneImage> for PyImage {
    fn from(inner: SceneImage) -> Self {
        Self { inner }
    }
}

#[pymethods]
impl PyImage {
    /// Builds an image from row-major `(H, W, C)` values.
    #[staticmethod]
    fn from_values(height: usize, width: usize, channels: usize, values: Vec<f32>) -> PyResult<Self> {
        let data = Array3::from_shape_vec((height, width, channels), values)
            .map_err(|e| PyValueError::new_err(format!("values do not match shape: {e}")))?;
        Ok(SceneImage::new(data).py_err()?.into())
    }

    #[staticmethod]
    #[pyo3(signature = (path, gray = false))]
    fn load(path: PathBuf, gray: bool) -> PyResult<Self> {
        let mode = if gray { ColorMode::Gray } else { ColorMode::Rgb };
        Ok(imaging::load_image(path, mode).py_err()?.into())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        imaging::save_image(&self.inner, path).py_err()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.dims()
    }

    /// Row-major `(H, W, C)` values.
    fn to_values(&self) -> Vec<f32> {
        self.inner.data().iter().copied().collect()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let (h, w, c) = self.inner.dims();
        format!("Image(height={h}, width={w}, channels={c})")
    }
}

#[pyfunction]
#[pyo3(signature = (height, width, seed = 0))]
fn synthetic_scene(height: usize, width: usize, seed: u64) -> PyResult<PyImage> {
    Ok(synthetic::scene(height, width, seed).py_err()?.into())
}

/// Aligned visible/infrared-like pair.
#[pyfunction]
#[pyo3(signature = (height, width, seed = 0))]
fn synthetic_modal_pair(height: usize, width: usize, seed: u64) -> PyResult<(PyImage, PyImage)> {
    let (a, b) = synthetic::modal_pair(height, width, seed).py_err()?;
    Ok((a.into(), b.into()))
}

/// Under- and over-exposed renderings of one scene.
#[pyfunction]
#[pyo3(signature = (height, width, seed = 0))]
fn synthetic_exposure_pair(height: usize, width: usize, seed: u64) -> PyResult<(PyImage, PyImage)> {
    let (a, b) = synthetic::exposure_pair(height, width, seed).py_err()?;
    Ok((a.into(), b.into()))
}

/// Two degraded views of `image` and their common/unique targets, as a dict
/// with keys `x1`, `x2`, `common`, `unique1`, `unique2`.
#[pyfunction]
#[pyo3(signature = (image, patch = 8, cover_frac = 0.75, seed = 0))]
fn degrade<'py>(
    py: Python<'py>,
    image: &PyImage,
    patch: usize,
    cover_frac: f64,
    seed: u64,
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let (h, w, _) = image.inner.dims();
    let masks = sample_mask_pair(h, w, patch, cover_frac, seed).py_err()?;
    let pair = apply_degradation(&image.inner, &masks).py_err()?;
    let t = decomposition_targets(&pair).py_err()?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("x1", PyImage::from(pair.x1))?;
    d.set_item("x2", PyImage::from(pair.x2))?;
    d.set_item("common", PyImage::from(t.common_gt))?;
    d.set_item("unique1", PyImage::from(t.unique1_gt))?;
    d.set_item("unique2", PyImage::from(t.unique2_gt))?;
    Ok(d)
}

fn parse_mode(mode: &str) -> PyResult<FusionMode> {
    mode.parse().py_err()
}

/// A decomposition-and-fusion network.
#[pyclass(name = "Model", module = "defusion", frozen)]
pub struct PyModel {
    inner: DeFusionModel,
    hash: String,
}

#[pymethods]
impl PyModel {
    /// Randomly initialised model of a size preset (`micro` or `tiny`).
    #[new]
    #[pyo3(signature = (preset = "micro", seed = 0))]
    fn new(preset: &str, seed: u64) -> PyResult<Self> {
        let mut cfg = ModelConfig::preset(preset).py_err()?;
        cfg.init_seed = seed;
        Ok(Self {
            inner: DeFusionModel::new(cfg).py_err()?,
            hash: String::new(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, hash) = trainer::load_model(path).py_err()?;
        Ok(Self { inner, hash })
    }

    /// Content hash of the checkpoint this model was loaded from; empty for
    /// fresh models.
    #[getter]
    fn checkpoint_hash(&self) -> &str {
        &self.hash
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.inner.config().patch_size()
    }

    #[pyo3(signature = (a, b, mode = "single"))]
    fn fuse(&self, a: &PyImage, b: &PyImage, mode: &str) -> PyResult<PyImage> {
        let req = FusionRequest::new(&a.inner, &b.inner, parse_mode(mode)?).py_err()?;
        Ok(fusion::fuse(&self.inner, &req).py_err()?.into())
    }

    /// Heatmap overlays and projector images keyed by `fu1`, `fu2`, `fc`,
    /// `ph_fu1`, `ph_fu2`, `ph_fc`.
    #[pyo3(signature = (a, b, mode = "single"))]
    fn decompose(&self, a: &PyImage, b: &PyImage, mode: &str) -> PyResult<BTreeMap<String, PyImage>> {
        let req = FusionRequest::new(&a.inner, &b.inner, parse_mode(mode)?).py_err()?;
        let vis = fusion::decompose_visualize(&self.inner, &req).py_err()?;
        Ok(DecompositionVisual::SUFFIXES
            .iter()
            .zip(vis.images())
            .map(|(k, img)| (k.to_string(), PyImage::from(img.clone())))
            .collect())
    }

    /// Writes the fused feature tokens to `path`; returns `(n_tokens, dim)`.
    #[pyo3(signature = (a, b, path, mode = "single"))]
    fn export_features(&self, a: &PyImage, b: &PyImage, path: PathBuf, mode: &str) -> PyResult<(usize, usize)> {
        let req = FusionRequest::new(&a.inner, &b.inner, parse_mode(mode)?).py_err()?;
        let f = fusion::export_features(&self.inner, &req, &self.hash).py_err()?;
        f.save(path).py_err()?;
        Ok((f.header.n_tokens, f.header.dim))
    }
}

/// Trains a single-modal model on `images` and returns
/// `(final_checkpoint, checkpoint_hash, total_losses)`.
#[pyfunction]
#[pyo3(signature = (images, out_dir, epochs = 1, steps_per_epoch = None, batch_size = 4, crop = 64, lr = 1e-4, seed = 0, preset = "micro", ablate = Vec::new()))]
#[allow(clippy::too_many_arguments)]
fn train(
    images: Vec<PyImage>,
    out_dir: PathBuf,
    epochs: usize,
    steps_per_epoch: Option<usize>,
    batch_size: usize,
    crop: usize,
    lr: f64,
    seed: u64,
    preset: &str,
    ablate: Vec<String>,
) -> PyResult<(PathBuf, String, Vec<f64>)> {
    let mut model = ModelConfig::preset(preset).py_err()?;
    model.init_seed = seed;
    let mut cfg = TrainConfig {
        epochs,
        steps_per_epoch,
        batch_size,
        crop,
        lr0: lr,
        seed,
        ..TrainConfig::default()
    };
    for a in &ablate {
        a.parse::<Ablation>().py_err()?.apply(&mut model, &mut cfg);
    }
    let single: Vec<SceneImage> = images.into_iter().map(|i| i.inner).collect();
    let t = Trainer::new(DeFusionModel::new(model).py_err()?, cfg, None).py_err()?;
    let out = trainer::fit(t, &single, &[], out_dir).py_err()?;
    let totals = out.reports.iter().map(|r| r.total).collect();
    Ok((out.final_checkpoint, out.checkpoint_hash, totals))
}

#[pyfunction]
fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    metrics::ssim(&a.inner, &b.inner).py_err()
}

#[pyfunction]
fn psnr(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    metrics::psnr(&a.inner, &b.inner).py_err()
}

#[pyfunction]
fn cc(fused: &PyImage, s1: &PyImage, s2: &PyImage) -> PyResult<f64> {
    metrics::cc(&fused.inner, &s1.inner, &s2.inner).py_err()
}

#[pyfunction]
fn ncie(fused: &PyImage, s1: &PyImage, s2: &PyImage) -> PyResult<f64> {
    metrics::ncie(&fused.inner, &s1.inner, &s2.inner).py_err()
}

#[pyfunction]
fn nabf(fused: &PyImage, s1: &PyImage, s2: &PyImage) -> PyResult<f64> {
    metrics::nabf(&fused.inner, &s1.inner, &s2.inner).py_err()
}

#[pyfunction]
fn mef_ssim(fused: &PyImage, stack: Vec<PyImage>) -> PyResult<f64> {
    let refs: Vec<&SceneImage> = stack.iter().map(|i| &i.inner).collect();
    metrics::mef_ssim(&fused.inner, &refs).py_err()
}

/// The task's metric set (`mef`, `mff` or `ivf`) as a name-to-score dict.
#[pyfunction]
#[pyo3(signature = (task, fused, s1, s2, gt = None))]
fn evaluate(task: &str, fused: &PyImage, s1: &PyImage, s2: &PyImage, gt: Option<PyImage>) -> PyResult<BTreeMap<String, f64>> {
    let task: Task = task.parse().py_err()?;
    metrics::evaluate(task, &fused.inner, &s1.inner, &s2.inner, gt.as_ref().map(|g| &g.inner)).py_err()
}

#[pymodule]
fn defusion(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synthetic_scene, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_modal_pair, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_exposure_pair, m)?)?;
    m.add_function(wrap_pyfunction!(degrade, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(cc, m)?)?;
    m.add_function(wrap_pyfunction!(ncie, m)?)?;
    m.add_function(wrap_pyfunction!(nabf, m)?)?;
    m.add_function(wrap_pyfunction!(mef_ssim, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
