//! Python module `lcx`: datasets, bundles, traversals and GradCAM.
//!
//! Images cross the boundary as [`Image`] objects and latents as plain
//! lists of floats.

use std::path::PathBuf;

use lcx::bundle::{load_bundle, ModelBundle};
use lcx::latent::{self, FitTarget, LatentDataset, LatentDirection, TraversalSeries};
use lcx::pipeline::{Pipeline, PipelineConfig, Stage, StageOutcome};
use lcx::synthdata::{self, GapEstimate};
use lcx::{gradcam, imageio, metrics, nets, ImageTensor, LatentVector};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyList};

create_exception!(lcx, LcxError, PyException, "Raised for every error reported by the toolkit.");

fn err(e: lcx::LcxError) -> PyErr {
    LcxError::new_err(e.to_string())
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for lcx::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

/// Square grayscale image with pixels in `[-1, 1]`, row-major.
#[pyclass(name = "Image", module = "lcx", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Image {
    inner: ImageTensor,
}

#[pymethods]
impl Image {
    #[new]
    fn new(resolution: usize, pixels: Vec<f32>) -> PyResult<Self> {
        Ok(Image {
            inner: ImageTensor::new(resolution, pixels).py()?,
        })
    }

    #[staticmethod]
    fn from_png(data: &[u8]) -> PyResult<Self> {
        Ok(Image {
            inner: imageio::decode_gray_png(data).py()?,
        })
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.resolution()
    }

    fn pixels(&self) -> Vec<f32> {
        self.inner.pixels().to_vec()
    }

    fn rows(&self) -> Vec<Vec<f32>> {
        self.inner.pixels().chunks(self.inner.resolution()).map(|r| r.to_vec()).collect()
    }

    fn to_png<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &imageio::encode_gray_png(&self.inner).py()?))
    }

    /// Normalized width of the dark joint, or `None` when none is found.
    fn measure_gap(&self) -> Option<f64> {
        synthdata::measure_gap(&self.inner).value()
    }

    fn __eq__(&self, other: &Image) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Image({0}x{0})", self.inner.resolution())
    }
}

/// Ground-truth factors of a synthetic sample.
#[pyclass(name = "Factors", module = "lcx", get_all, set_all, skip_from_py_object)]
#[derive(Clone)]
pub struct Factors {
    gap_width: f64,
    bump_amplitude: f64,
    x_offset: f64,
    y_offset: f64,
    texture_seed: u32,
}

#[pymethods]
impl Factors {
    #[new]
    #[pyo3(signature = (gap_width, bump_amplitude=0.0, x_offset=0.0, y_offset=0.0, texture_seed=0))]
    fn new(gap_width: f64, bump_amplitude: f64, x_offset: f64, y_offset: f64, texture_seed: u32) -> Self {
        Factors {
            gap_width,
            bump_amplitude,
            x_offset,
            y_offset,
            texture_seed,
        }
    }

    #[pyo3(signature = (threshold=None))]
    fn label(&self, threshold: Option<f64>) -> u8 {
        self.to_core().label(threshold.unwrap_or(synthdata::DEFAULT_GAP_THRESHOLD))
    }

    fn __repr__(&self) -> String {
        format!(
            "Factors(gap_width={}, bump_amplitude={}, x_offset={}, y_offset={}, texture_seed={})",
            self.gap_width, self.bump_amplitude, self.x_offset, self.y_offset, self.texture_seed
        )
    }
}

impl Factors {
    fn to_core(&self) -> synthdata::FactorVector {
        synthdata::FactorVector {
            gap_width: self.gap_width,
            bump_amplitude: self.bump_amplitude,
            x_offset: self.x_offset,
            y_offset: self.y_offset,
            texture_seed: self.texture_seed,
        }
    }

    fn from_core(f: &synthdata::FactorVector) -> Self {
        Factors {
            gap_width: f.gap_width,
            bump_amplitude: f.bump_amplitude,
            x_offset: f.x_offset,
            y_offset: f.y_offset,
            texture_seed: f.texture_seed,
        }
    }
}

/// Renders one synthetic sample; returns `(image, label)`.
#[pyfunction]
fn generate_sample(factors: &Factors, resolution: usize) -> PyResult<(Image, u8)> {
    let s = synthdata::generate_sample(&factors.to_core(), resolution).py()?;
    Ok((Image { inner: s.image }, s.label))
}

/// Generates a split; returns `{"train": [(image, label, factors)], ...}`.
#[pyfunction]
fn generate_dataset<'py>(
    py: Python<'py>,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
    resolution: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let ds = py
        .detach(|| synthdata::generate_dataset(n_train, n_val, n_test, seed, resolution))
        .py()?;
    let out = PyDict::new(py);
    for (name, part) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        let rows = part
            .iter()
            .map(|s| (Image { inner: s.image.clone() }, s.label, Factors::from_core(&s.factors)))
            .collect::<Vec<_>>();
        out.set_item(name, rows)?;
    }
    Ok(out)
}

/// Logistic direction in latent space.
#[pyclass(name = "Direction", module = "lcx", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Direction {
    inner: LatentDirection,
}

#[pymethods]
impl Direction {
    #[getter]
    fn alpha(&self) -> Vec<f64> {
        self.inner.alpha.clone()
    }

    #[getter]
    fn alpha_unit(&self) -> Vec<f64> {
        self.inner.alpha_unit.clone()
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta
    }

    #[getter]
    fn projection_std(&self) -> f64 {
        self.inner.projection_std
    }

    #[getter]
    fn train_auc(&self) -> f64 {
        self.inner.train_auc
    }

    /// `sigmoid(alpha . w + beta)`.
    fn predict(&self, latent: Vec<f32>) -> PyResult<f64> {
        latent::latent_predict(&self.inner, &LatentVector(latent)).py()
    }

    /// The latent reached from `latent` after a step of `lam`.
    #[pyo3(signature = (latent, lam, raw=false))]
    fn shift(&self, latent: Vec<f32>, lam: f64, raw: bool) -> Vec<f32> {
        let mode = if raw { latent::StepMode::Raw } else { latent::StepMode::Unit };
        latent::shifted_latent(&self.inner, &LatentVector(latent), lam, mode).0
    }

    fn __repr__(&self) -> String {
        format!("Direction(dim={}, beta={:.4})", self.inner.dim(), self.inner.beta)
    }
}

/// Fits `f~(w) = sigmoid(alpha . w + beta)` to latents and soft labels.
#[pyfunction]
#[pyo3(signature = (latents, soft_labels, l2=None, soft=false, seed=0))]
fn fit_direction(
    py: Python<'_>,
    latents: Vec<Vec<f32>>,
    soft_labels: Vec<f64>,
    l2: Option<f64>,
    soft: bool,
    seed: u64,
) -> PyResult<Direction> {
    let n = latents.len();
    let ds = LatentDataset::from_rows(latents.into_iter().map(LatentVector).collect(), soft_labels, seed).py()?;
    let target = if soft { FitTarget::Soft } else { FitTarget::Hard };
    let l2 = l2.unwrap_or(1.0 / n.max(1) as f64);
    let inner = py.detach(|| latent::fit_direction_with(&ds, l2, target)).py()?;
    Ok(Direction { inner })
}

#[pyfunction]
fn default_lambdas() -> Vec<f64> {
    latent::default_lambdas()
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::auc(&scores, &labels).py()
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> Option<f64> {
    metrics::spearman(&x, &y)
}

fn series_to_py<'py>(py: Python<'py>, series: &TraversalSeries) -> PyResult<Bound<'py, PyList>> {
    let frames = PyList::empty(py);
    for f in &series.frames {
        let d = PyDict::new(py);
        d.set_item("lambda", f.lambda)?;
        d.set_item("latent_score", f.latent_score)?;
        d.set_item("image_score", f.image_score)?;
        d.set_item("gap", f.gap_estimate.and_then(GapEstimate::value))?;
        d.set_item("image", Image { inner: f.image.clone() })?;
        frames.append(d)?;
    }
    Ok(frames)
}

/// A trained model bundle loaded from disk.
#[pyclass(name = "Bundle", module = "lcx", frozen, skip_from_py_object)]
pub struct Bundle {
    inner: ModelBundle,
    digest: String,
}

#[pymethods]
impl Bundle {
    /// Loads and verifies the bundle directory at `path`.
    #[staticmethod]
    fn load(py: Python<'_>, path: PathBuf) -> PyResult<Self> {
        let (inner, digest) = py.detach(|| load_bundle(&path)).py()?;
        Ok(Bundle { inner, digest })
    }

    #[getter]
    fn digest(&self) -> &str {
        &self.digest
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.resolution()
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    #[getter]
    fn direction(&self) -> Direction {
        Direction {
            inner: self.inner.direction.clone(),
        }
    }

    fn gradcam_layers(&self) -> Vec<String> {
        self.inner.classifier_spec.feature_layers()
    }

    /// Maps noise vectors through the mapping network.
    fn map_noise(&self, py: Python<'_>, noise: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        let b = &self.inner;
        let rows: Vec<&[f32]> = noise.iter().map(|v| v.as_slice()).collect();
        let z = lcx::Tensor::stack_rows(&rows, &[b.generator_spec.noise_dim]).py()?;
        let out = py
            .detach(|| nets::mapping_forward_batch(&b.mapping, &b.generator_spec, &z))
            .py()?;
        Ok(out.into_iter().map(|w| w.0).collect())
    }

    /// `G(w)`.
    fn generate(&self, py: Python<'_>, latent: Vec<f32>) -> PyResult<Image> {
        let b = &self.inner;
        let inner = py
            .detach(|| nets::synthesis_forward(&b.synthesis, &b.generator_spec, &LatentVector(latent)))
            .py()?;
        Ok(Image { inner })
    }

    /// `E(x)`.
    fn encode(&self, py: Python<'_>, image: &Image) -> PyResult<Vec<f32>> {
        let b = &self.inner;
        let w = py
            .detach(|| nets::encoder_forward(&b.encoder, &b.encoder_spec, &image.inner))
            .py()?;
        Ok(w.0)
    }

    /// Classifier probability of label 1.
    fn classify(&self, py: Python<'_>, image: &Image) -> PyResult<f64> {
        let b = &self.inner;
        py.detach(|| nets::classifier_forward(&b.classifier, &b.classifier_spec, &image.inner))
            .py()
    }

    fn latent_score(&self, latent: Vec<f32>) -> PyResult<f64> {
        latent::latent_predict(&self.inner.direction, &LatentVector(latent)).py()
    }

    /// Renders `G(w + lambda * step)` for each lambda; one dict per frame.
    #[pyo3(signature = (latent, lambdas=None, gap_oracle=true))]
    fn traverse<'py>(
        &self,
        py: Python<'py>,
        latent: Vec<f32>,
        lambdas: Option<Vec<f64>>,
        gap_oracle: bool,
    ) -> PyResult<Bound<'py, PyList>> {
        let lambdas = lambdas.unwrap_or_else(latent::default_lambdas);
        let b = &self.inner;
        let series = py
            .detach(|| b.traverse(&LatentVector(latent), &lambdas, gap_oracle, "python"))
            .py()?;
        series_to_py(py, &series)
    }

    /// Encodes `image` and traverses from its latent.
    #[pyo3(signature = (image, lambdas=None))]
    fn explain<'py>(&self, py: Python<'py>, image: &Image, lambdas: Option<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
        let lambdas = lambdas.unwrap_or_else(latent::default_lambdas);
        let b = &self.inner;
        let exp = py.detach(|| b.explain(&image.inner, &lambdas, "python")).py()?;
        let d = PyDict::new(py);
        d.set_item("latent", exp.series.base_latent.0.clone())?;
        d.set_item("frames", series_to_py(py, &exp.series)?)?;
        d.set_item("reconstruction_psnr", exp.reconstruction.psnr)?;
        d.set_item("prediction_drift", exp.reconstruction.prediction_drift)?;
        Ok(d)
    }

    /// GradCAM heatmap in `[0, 1]` as rows, for the predicted class.
    #[pyo3(signature = (image, layer=None))]
    fn gradcam(&self, py: Python<'_>, image: &Image, layer: Option<String>) -> PyResult<Vec<Vec<f32>>> {
        let b = &self.inner;
        let layer = match layer {
            Some(l) => l,
            None => b
                .classifier_spec
                .feature_layers()
                .pop()
                .ok_or_else(|| LcxError::new_err("classifier has no feature layers"))?,
        };
        let h = py
            .detach(|| gradcam::gradcam(&b.classifier, &b.classifier_spec, &image.inner, &layer))
            .py()?;
        Ok(h.values.chunks(h.resolution).map(|r| r.to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Bundle({0}x{0}, latent_dim={1}, digest={2})",
            self.inner.resolution(),
            self.inner.latent_dim(),
            &self.digest[..12]
        )
    }
}

/// Runs the pipeline from a JSON config into `out`. `stage` runs a single
/// stage. Returns `{stage: "ran" | "skipped"}`.
#[pyfunction]
#[pyo3(signature = (config, out, stage=None, force=false))]
fn run_pipeline(
    py: Python<'_>,
    config: PathBuf,
    out: PathBuf,
    stage: Option<String>,
    force: bool,
) -> PyResult<Vec<(String, String)>> {
    let cfg = PipelineConfig::load(&config).py()?;
    let stage: Option<Stage> = match stage {
        Some(s) => Some(s.parse().py()?),
        None => None,
    };
    let outcomes = py
        .detach(|| -> lcx::Result<Vec<(Stage, StageOutcome)>> {
            let mut p = Pipeline::open(cfg, out)?;
            p.log = Box::new(|_| {});
            match stage {
                Some(s) => Ok(vec![(s, p.run_stage(s, force)?)]),
                None => p.run_all(force),
            }
        })
        .py()?;
    Ok(outcomes
        .into_iter()
        .map(|(s, o)| {
            let o = match o {
                StageOutcome::Ran => "ran",
                StageOutcome::Skipped => "skipped",
            };
            (s.name().to_string(), o.to_string())
        })
        .collect())
}

#[pymodule]
#[pyo3(name = "lcx")]
fn lcx_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LcxError", m.py().get_type::<LcxError>())?;
    m.add_class::<Image>()?;
    m.add_class::<Factors>()?;
    m.add_class::<Direction>()?;
    m.add_class::<Bundle>()?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(fit_direction, m)?)?;
    m.add_function(wrap_pyfunction!(default_lambdas, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add("DEFAULT_GAP_THRESHOLD", synthdata::DEFAULT_GAP_THRESHOLD)?;
    Ok(())
}
