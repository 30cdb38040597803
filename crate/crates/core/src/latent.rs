//! Latent-space analysis: label generator samples with the black-box
//! classifier, fit a logistic direction on `W`, and walk along it.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LcxError, Result};
use crate::imageio;
use crate::metrics;
use crate::nets::{self, sigmoid, ClassifierSpec, EncoderSpec, GeneratorSpec, NetworkParams};
use crate::synthdata::{self, stream_seed, GapEstimate};
use crate::tensor::{ImageTensor, LatentVector};
use crate::training::{sample_noise, softplus};

const TAG_LATENT: u64 = 0x4C4154;
pub const MAX_NEWTON_ITERATIONS: usize = 200;
/// Soft labels are kept strictly inside `(0, 1)`.
const SOFT_LABEL_EPS: f64 = 1e-12;

/// Eleven evenly spaced values from -2.5 to 2.5.
pub fn default_lambdas() -> Vec<f64> {
    (0..11).map(|k| -2.5 + 0.5 * k as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDataset {
    pub latents: Vec<LatentVector>,
    pub soft_labels: Vec<f64>,
    pub hard_labels: Vec<u8>,
    pub seed: u64,
}

impl LatentDataset {
    /// Builds a dataset from explicit rows; hard labels follow `soft > 0.5`.
    pub fn from_rows(latents: Vec<LatentVector>, soft_labels: Vec<f64>, seed: u64) -> Result<Self> {
        if latents.len() != soft_labels.len() {
            return Err(LcxError::shape(format!(
                "{} latents vs {} labels",
                latents.len(),
                soft_labels.len()
            )));
        }
        if let Some(first) = latents.first() {
            if latents.iter().any(|w| w.dim() != first.dim()) {
                return Err(LcxError::shape("latent rows differ in dimension"));
            }
        }
        if let Some(&bad) = soft_labels.iter().find(|&&y| !(y > 0.0 && y < 1.0)) {
            return Err(LcxError::Range {
                field: "soft_labels",
                value: bad,
                expected: "(0, 1)",
            });
        }
        let hard_labels = soft_labels.iter().map(|&y| u8::from(y > 0.5)).collect();
        Ok(LatentDataset {
            latents,
            soft_labels,
            hard_labels,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.latents.first().map_or(0, LatentVector::dim)
    }

    pub fn positive_fraction(&self) -> f64 {
        self.hard_labels.iter().map(|&l| l as f64).sum::<f64>() / self.len().max(1) as f64
    }
}

/// Draws `n` latents `w = mapping(z)` and labels them with `f(G(w))`.
pub fn sample_latent_dataset(
    mapping: &NetworkParams,
    synthesis: &NetworkParams,
    g_spec: &GeneratorSpec,
    classifier: &NetworkParams,
    c_spec: &ClassifierSpec,
    n: usize,
    seed: u64,
) -> Result<LatentDataset> {
    let required = 2 * g_spec.latent_dim;
    if n < required {
        return Err(LcxError::Conditioning { required, got: n });
    }
    if c_spec.resolution != g_spec.resolution {
        return Err(LcxError::shape("classifier and generator resolutions differ"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &[TAG_LATENT]));
    let z = sample_noise(&mut rng, n, g_spec.noise_dim);
    let latents = nets::mapping_forward_batch(mapping, g_spec, &z)?;
    let mut soft = Vec::with_capacity(n);
    for chunk in latents.chunks(256) {
        let images = nets::synthesis_forward_batch(synthesis, g_spec, chunk)?;
        soft.extend(
            nets::classifier_forward_batch(classifier, c_spec, &images)?
                .into_iter()
                .map(|p| p.clamp(SOFT_LABEL_EPS, 1.0 - SOFT_LABEL_EPS)),
        );
    }
    LatentDataset::from_rows(latents, soft, seed)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitTarget {
    #[default]
    Hard,
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDirection {
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub alpha_unit: Vec<f64>,
    pub projection_std: f64,
    pub train_auc: f64,
    pub l2_strength: f64,
    #[serde(default)]
    pub target: FitTarget,
}

impl LatentDirection {
    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha_norm(&self) -> f64 {
        self.alpha.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// The regularized objective minimized by [`fit_direction`]:
/// `sum_i [softplus(a.w_i + b) - y_i (a.w_i + b)] + l2/2 |a|^2`.
pub fn regularized_loss(latents: &[LatentVector], targets: &[f64], alpha: &[f64], beta: f64, l2: f64) -> f64 {
    let data: f64 = latents
        .iter()
        .zip(targets)
        .map(|(w, &y)| {
            let z = dot(alpha, w) + beta;
            softplus(z) - y * z
        })
        .sum();
    data + 0.5 * l2 * alpha.iter().map(|a| a * a).sum::<f64>()
}

fn dot(a: &[f64], w: &LatentVector) -> f64 {
    a.iter().zip(w.as_slice()).map(|(&x, &y)| x * y as f64).sum()
}

/// Gradient of [`regularized_loss`] in the order `(alpha.., beta)`.
pub fn regularized_gradient(latents: &[LatentVector], targets: &[f64], alpha: &[f64], beta: f64, l2: f64) -> Vec<f64> {
    let d = alpha.len();
    let mut g = vec![0.0; d + 1];
    for (w, &y) in latents.iter().zip(targets) {
        let r = sigmoid(dot(alpha, w) + beta) - y;
        for (gj, &x) in g.iter_mut().zip(w.as_slice()) {
            *gj += r * x as f64;
        }
        g[d] += r;
    }
    for j in 0..d {
        g[j] += l2 * alpha[j];
    }
    g
}

/// In-place Cholesky solve of `A x = b` for symmetric positive definite `A`
/// stored row-major. Returns `None` when `A` is not numerically SPD.
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    Some(y)
}

/// Fits `f~(w) = sigmoid(a.w + b)` to the hard labels by damped Newton
/// iterations until the gradient norm is at most `1e-6 * n`.
pub fn fit_direction(dataset: &LatentDataset, l2_strength: f64) -> Result<LatentDirection> {
    fit_direction_with(dataset, l2_strength, FitTarget::Hard)
}

pub fn fit_direction_with(dataset: &LatentDataset, l2_strength: f64, target: FitTarget) -> Result<LatentDirection> {
    if !(l2_strength >= 0.0 && l2_strength.is_finite()) {
        return Err(LcxError::Range {
            field: "l2_strength",
            value: l2_strength,
            expected: ">= 0",
        });
    }
    let n = dataset.len();
    if !dataset.hard_labels.contains(&0) || !dataset.hard_labels.contains(&1) {
        return Err(LcxError::DegenerateLabels(format!(
            "all {n} hard labels are identical"
        )));
    }
    let d = dataset.dim();
    let latents = &dataset.latents;
    let targets: Vec<f64> = match target {
        FitTarget::Hard => dataset.hard_labels.iter().map(|&l| l as f64).collect(),
        FitTarget::Soft => dataset.soft_labels.clone(),
    };
    let tol = 1e-6 * n as f64;
    let p = d + 1;
    let mut theta = vec![0.0; p];
    let loss_at = |t: &[f64]| regularized_loss(latents, &targets, &t[..d], t[d], l2_strength);
    let mut loss = loss_at(&theta);
    let mut grad_norm;
    let mut converged = false;
    for _ in 0..MAX_NEWTON_ITERATIONS {
        let grad = regularized_gradient(latents, &targets, &theta[..d], theta[d], l2_strength);
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm <= tol {
            converged = true;
            break;
        }
        let mut h = vec![0.0; p * p];
        let mut x = vec![0.0; p];
        for w in latents {
            for (xj, &v) in x.iter_mut().zip(w.as_slice()) {
                *xj = v as f64;
            }
            x[d] = 1.0;
            let s = sigmoid(dot(&theta[..d], w) + theta[d]);
            let c = s * (1.0 - s);
            if c == 0.0 {
                continue;
            }
            for i in 0..p {
                let ci = c * x[i];
                for j in 0..=i {
                    h[i * p + j] += ci * x[j];
                }
            }
        }
        for i in 0..p {
            for j in 0..i {
                h[j * p + i] = h[i * p + j];
            }
        }
        for j in 0..d {
            h[j * p + j] += l2_strength;
        }
        // Levenberg damping only when the plain Hessian is not SPD.
        let mut damping = 0.0;
        let step = loop {
            let mut hd = h.clone();
            for i in 0..p {
                hd[i * p + i] += damping;
            }
            if let Some(s) = cholesky_solve(&hd, &grad, p) {
                break s;
            }
            damping = if damping == 0.0 { 1e-10 * (1.0 + grad_norm) } else { damping * 10.0 };
            if damping > 1e12 {
                return Err(LcxError::Convergence {
                    iterations: MAX_NEWTON_ITERATIONS,
                    grad_norm,
                    loss,
                });
            }
        };
        let slope: f64 = -grad.iter().zip(&step).map(|(g, s)| g * s).sum::<f64>();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&step).map(|(a, s)| a - t * s).collect();
            let cl = loss_at(&cand);
            if cl <= loss + 1e-4 * t * slope {
                theta = cand;
                loss = cl;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // At the float floor of the objective; accept only if the
            // gradient is already tiny relative to the tolerance scale.
            break;
        }
    }
    if !converged {
        let grad = regularized_gradient(latents, &targets, &theta[..d], theta[d], l2_strength);
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm > tol {
            return Err(LcxError::Convergence {
                iterations: MAX_NEWTON_ITERATIONS,
                grad_norm,
                loss,
            });
        }
    }
    let alpha = theta[..d].to_vec();
    let beta = theta[d];
    let norm = alpha.iter().map(|a| a * a).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(LcxError::DegenerateLabels(
            "fitted direction has zero norm".into(),
        ));
    }
    let alpha_unit: Vec<f64> = alpha.iter().map(|a| a / norm).collect();
    let proj: Vec<f64> = latents.iter().map(|w| dot(&alpha_unit, w)).collect();
    let mean = proj.iter().sum::<f64>() / n as f64;
    let projection_std = (proj.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if !(projection_std > 0.0) {
        return Err(LcxError::DegenerateLabels(
            "latents have zero spread along the fitted direction".into(),
        ));
    }
    let scores: Vec<f64> = latents.iter().map(|w| dot(&alpha, w) + beta).collect();
    let train_auc = metrics::auc(&scores, &dataset.hard_labels)?;
    Ok(LatentDirection {
        alpha,
        beta,
        alpha_unit,
        projection_std,
        train_auc,
        l2_strength,
        target,
    })
}

/// `f~(w) = sigmoid(a.w + b)`.
pub fn latent_predict(direction: &LatentDirection, w: &LatentVector) -> Result<f64> {
    if w.dim() != direction.dim() {
        return Err(LcxError::shape(format!(
            "latent has dimension {}, direction has {}",
            w.dim(),
            direction.dim()
        )));
    }
    Ok(sigmoid(dot(&direction.alpha, w) + direction.beta))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// `w + lambda * projection_std * alpha_unit`
    #[default]
    Unit,
    /// `w + lambda * alpha`
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub lambda: f64,
    pub image: ImageTensor,
    pub latent_score: f64,
    pub image_score: f64,
    pub gap_estimate: Option<GapEstimate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraversalSeries {
    pub input_id: String,
    pub base_latent: LatentVector,
    pub lambdas: Vec<f64>,
    pub frames: Vec<Frame>,
    pub mode: StepMode,
}

impl TraversalSeries {
    pub fn latent_scores(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.latent_score).collect()
    }

    pub fn image_scores(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.image_score).collect()
    }

    pub fn identity_frame(&self) -> &Frame {
        self.frames
            .iter()
            .find(|f| f.lambda == 0.0)
            .expect("traversals always contain lambda = 0")
    }
}

pub fn check_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.iter().any(|l| !l.is_finite()) {
        return Err(LcxError::Contract("lambdas must be finite".into()));
    }
    if !lambdas.contains(&0.0) {
        return Err(LcxError::Contract("lambda grid must contain 0".into()));
    }
    if lambdas.windows(2).any(|p| p[0] >= p[1]) {
        return Err(LcxError::Contract(
            "lambdas must be sorted ascending without duplicates".into(),
        ));
    }
    Ok(())
}

/// The latent reached from `w` at `lambda`. `lambda == 0` returns `w`
/// untouched.
pub fn shifted_latent(direction: &LatentDirection, w: &LatentVector, lambda: f64, mode: StepMode) -> LatentVector {
    if lambda == 0.0 {
        return w.clone();
    }
    let step: Vec<f64> = match mode {
        StepMode::Unit => direction
            .alpha_unit
            .iter()
            .map(|a| lambda * direction.projection_std * a)
            .collect(),
        StepMode::Raw => direction.alpha.iter().map(|a| lambda * a).collect(),
    };
    LatentVector(
        w.as_slice()
            .iter()
            .zip(&step)
            .map(|(&x, s)| (x as f64 + s) as f32)
            .collect(),
    )
}

/// Read-only view of the networks a traversal needs.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub synthesis: &'a NetworkParams,
    pub g_spec: &'a GeneratorSpec,
    pub encoder: &'a NetworkParams,
    pub e_spec: &'a EncoderSpec,
    pub classifier: &'a NetworkParams,
    pub c_spec: &'a ClassifierSpec,
    pub direction: &'a LatentDirection,
}

/// Renders `G(w + lambda * step)` for each lambda. Every frame is rendered
/// on its own, so the `lambda = 0` frame is exactly `synthesis_forward(w)`.
pub fn traverse(
    models: &Models,
    w: &LatentVector,
    lambdas: &[f64],
    gap_oracle: bool,
    mode: StepMode,
    input_id: &str,
) -> Result<TraversalSeries> {
    check_lambdas(lambdas)?;
    if w.dim() != models.direction.dim() || w.dim() != models.g_spec.latent_dim {
        return Err(LcxError::shape(format!(
            "latent has dimension {}, bundle expects {}",
            w.dim(),
            models.g_spec.latent_dim
        )));
    }
    let mut frames = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let wk = shifted_latent(models.direction, w, lambda, mode);
        let image = nets::synthesis_forward(models.synthesis, models.g_spec, &wk)?;
        let image_score = nets::classifier_forward(models.classifier, models.c_spec, &image)?;
        frames.push(Frame {
            lambda,
            latent_score: latent_predict(models.direction, &wk)?,
            image_score,
            gap_estimate: gap_oracle.then(|| synthdata::measure_gap(&image)),
            image,
        });
    }
    Ok(TraversalSeries {
        input_id: input_id.to_string(),
        base_latent: w.clone(),
        lambdas: lambdas.to_vec(),
        frames,
        mode,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    /// PSNR of `G(E(x))` against `x`, in dB.
    pub psnr: f64,
    /// `|f(x) - f(G(E(x)))|`.
    pub prediction_drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub series: TraversalSeries,
    pub reconstruction: Reconstruction,
}

/// Encodes `image`, traverses from `E(image)` and reports how faithfully
/// the encoder-generator pair reproduces the input.
pub fn explain(models: &Models, image: &ImageTensor, lambdas: &[f64], input_id: &str) -> Result<Explanation> {
    if image.resolution() != models.e_spec.resolution {
        return Err(LcxError::shape(format!(
            "image is {0}x{0}, bundle expects {1}x{1}",
            image.resolution(),
            models.e_spec.resolution
        )));
    }
    check_lambdas(lambdas)?;
    let w = nets::encoder_forward(models.encoder, models.e_spec, image)?;
    let series = traverse(models, &w, lambdas, true, StepMode::Unit, input_id)?;
    let rebuilt = &series.identity_frame().image;
    let original_score = nets::classifier_forward(models.classifier, models.c_spec, image)?;
    Ok(Explanation {
        reconstruction: Reconstruction {
            psnr: metrics::psnr(image, rebuilt),
            prediction_drift: (original_score - series.identity_frame().image_score).abs(),
        },
        series,
    })
}

#[derive(Serialize)]
struct Sidecar<'a> {
    input_id: &'a str,
    mode: StepMode,
    lambdas: &'a [f64],
    frames: Vec<String>,
    latent_scores: Vec<f64>,
    image_scores: Vec<f64>,
    gap_estimates: Vec<Option<GapEstimate>>,
    base_latent: &'a LatentVector,
    reconstruction: Option<&'a Reconstruction>,
    bundle_digest: Option<&'a str>,
}

/// Writes `frame_XX.png` per frame plus `series.json`.
pub fn export_series(
    series: &TraversalSeries,
    reconstruction: Option<&Reconstruction>,
    bundle_digest: Option<&str>,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LcxError::io(dir, e))?;
    let mut names = Vec::with_capacity(series.frames.len());
    for (k, frame) in series.frames.iter().enumerate() {
        let name = format!("frame_{k:02}.png");
        let path = dir.join(&name);
        std::fs::write(&path, imageio::encode_gray_png(&frame.image)?).map_err(|e| LcxError::io(&path, e))?;
        names.push(name);
    }
    let sidecar = Sidecar {
        input_id: &series.input_id,
        mode: series.mode,
        lambdas: &series.lambdas,
        frames: names,
        latent_scores: series.latent_scores(),
        image_scores: series.image_scores(),
        gap_estimates: series.frames.iter().map(|f| f.gap_estimate).collect(),
        base_latent: &series.base_latent,
        reconstruction,
        bundle_digest,
    };
    let path = dir.join("series.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| LcxError::io(&path, e))
}
