//! The three trainers: adversarial training of the generator, MSE training
//! of the encoder on synthetic `(w, G(w))` pairs, and binary cross-entropy
//! training of the black-box classifier.
//!
//! Batches are a pure function of `(seed, step)`: every step reseeds its own
//! ChaCha stream, so a checkpoint needs only the step counter, parameters and
//! optimizer moments to resume bit-exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LcxError, Result};
use crate::graph::Graph;
use crate::metrics;
use crate::nets::{
    self, classifier_graph, discriminator_graph, discriminator_graph_with, encoder_graph, mapping_graph, sigmoid, synthesis_graph, Bound,
    ClassifierSpec, DiscriminatorSpec, EncoderSpec, GeneratorSpec, NetworkParams,
};
use crate::optim::Adam;
use crate::persist;
use crate::synthdata::{self, stream_seed, DatasetSplit, LabeledSample};
use crate::tensor::{ImageTensor, LatentVector, Tensor};

const TAG_GAN: u64 = 0x47414E;
const TAG_ENCODER: u64 = 0x454E43;
const TAG_CLASSIFIER: u64 = 0x434C53;
const TAG_INIT: u64 = 0x494E49;
const TAG_EVAL: u64 = 0x45564C;

/// Discriminator loss below this for [`DIVERGENCE_PATIENCE`] consecutive
/// steps aborts GAN training.
pub const DIVERGENCE_LOSS: f64 = 1e-4;
pub const DIVERGENCE_PATIENCE: usize = 500;
/// Pixel-space length of the finite-difference probe used for the R1
/// Hessian-vector product. The probe runs with the activation pattern of
/// the unperturbed input, where `grad_theta D` is affine in `x`, so the
/// difference is exact up to rounding and the length only trades off
/// cancellation.
const R1_PROBE: f32 = 1.0;
pub const QUALITY_SAMPLES: usize = 200;
pub const ENCODER_EVAL_SAMPLES: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub r1_gamma: f32,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
}

fn default_beta1() -> f32 {
    0.0
}

fn default_beta2() -> f32 {
    0.99
}

impl TrainConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        let bad = |field: &str, msg: &str| LcxError::Config {
            path: format!("{path}.{field}"),
            message: msg.to_string(),
        };
        if self.steps == 0 {
            return Err(bad("steps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(bad("learning_rate", "must be positive"));
        }
        if !(self.r1_gamma >= 0.0 && self.r1_gamma.is_finite()) {
            return Err(bad("r1_gamma", "must be >= 0"));
        }
        if self.checkpoint_every == 0 {
            return Err(bad("checkpoint_every", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(bad("eval_every", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(bad("beta1", "Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    fn adam(&self) -> Adam {
        Adam::new(self.learning_rate, self.beta1, self.beta2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_curves: BTreeMap<String, Vec<(usize, f64)>>,
    pub final_metrics: BTreeMap<String, f64>,
    pub wall_time_s: f64,
    pub seed: u64,
}

/// Loss curves accumulated between eval steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub curves: BTreeMap<String, Vec<(usize, f64)>>,
    pending: BTreeMap<String, (f64, usize)>,
    pub low_d_streak: usize,
}

impl Progress {
    fn record(&mut self, name: &str, value: f64) {
        let e = self.pending.entry(name.to_string()).or_insert((0.0, 0));
        e.0 += value;
        e.1 += 1;
    }

    fn flush(&mut self, step: usize) {
        for (name, (sum, count)) in std::mem::take(&mut self.pending) {
            if count > 0 {
                self.curves.entry(name).or_default().push((step, sum / count as f64));
            }
        }
    }

    fn last(&self, name: &str) -> Option<f64> {
        self.curves.get(name).and_then(|c| c.last()).map(|&(_, v)| v)
    }
}

/// Everything needed to resume a trainer.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub nets: BTreeMap<String, NetworkParams>,
    pub optimizers: BTreeMap<String, Adam>,
    pub progress: Progress,
}

#[derive(Serialize, Deserialize)]
struct OptimizerState {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: u64,
    moments_index: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TrainingState {
    step: usize,
    /// Batches are reseeded per step, so the stream position is the step.
    rng_stream_position: usize,
    optimizers: BTreeMap<String, OptimizerState>,
    progress: Progress,
}

impl Checkpoint {
    pub fn dir_for(root: &Path, step: usize) -> PathBuf {
        root.join(format!("step_{step:08}"))
    }

    pub fn save(&self, root: &Path) -> Result<PathBuf> {
        let dir = Self::dir_for(root, self.step);
        for (name, params) in &self.nets {
            persist::save_params(params, &serde_json::json!({ "network": name }), &dir.join("nets").join(name))?;
        }
        let mut optimizers = BTreeMap::new();
        for (name, adam) in &self.optimizers {
            for (kind, moments) in [("m", &adam.m), ("v", &adam.v)] {
                let p = NetworkParams {
                    arrays: moments.clone(),
                    init_seed: 0,
                };
                persist::save_params(&p, &serde_json::json!({ "moment": kind }), &dir.join("optim").join(format!("{name}.{kind}")))?;
            }
            optimizers.insert(
                name.clone(),
                OptimizerState {
                    lr: adam.lr,
                    beta1: adam.beta1,
                    beta2: adam.beta2,
                    eps: adam.eps,
                    step: adam.step,
                    moments_index: adam.m.keys().cloned().collect(),
                },
            );
        }
        let state = TrainingState {
            step: self.step,
            rng_stream_position: self.step,
            optimizers,
            progress: self.progress.clone(),
        };
        let path = dir.join("state.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&state)?).map_err(|e| LcxError::io(&path, e))?;
        Ok(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("state.json");
        let bytes = std::fs::read(&path).map_err(|e| LcxError::io(&path, e))?;
        let state: TrainingState = serde_json::from_slice(&bytes)?;
        let mut nets = BTreeMap::new();
        let nets_dir = dir.join("nets");
        let entries = std::fs::read_dir(&nets_dir).map_err(|e| LcxError::io(&nets_dir, e))?;
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        for name in names {
            let (p, _) = persist::load_params(&nets_dir.join(&name))?;
            nets.insert(name, p);
        }
        let mut optimizers = BTreeMap::new();
        for (name, s) in state.optimizers {
            let (m, _) = persist::load_params(&dir.join("optim").join(format!("{name}.m")))?;
            let (v, _) = persist::load_params(&dir.join("optim").join(format!("{name}.v")))?;
            optimizers.insert(
                name,
                Adam {
                    lr: s.lr,
                    beta1: s.beta1,
                    beta2: s.beta2,
                    eps: s.eps,
                    step: s.step,
                    m: m.arrays,
                    v: v.arrays,
                },
            );
        }
        Ok(Checkpoint {
            step: state.step,
            nets,
            optimizers,
            progress: state.progress,
        })
    }

    /// Most recent `step_*` directory under `root`, if any.
    pub fn latest(root: &Path) -> Option<PathBuf> {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
            .ok()?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("step_"))
                    && p.join("state.json").exists()
            })
            .collect();
        dirs.sort();
        dirs.pop()
    }

    fn take_net(&mut self, name: &str) -> Result<NetworkParams> {
        self.nets
            .remove(name)
            .ok_or_else(|| LcxError::shape(format!("checkpoint lacks network `{name}`")))
    }

    fn take_opt(&mut self, name: &str) -> Result<Adam> {
        self.optimizers
            .remove(name)
            .ok_or_else(|| LcxError::shape(format!("checkpoint lacks optimizer `{name}`")))
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn step_rng(seed: u64, tag: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, &[tag, step as u64]))
}

pub fn sample_noise(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Tensor {
    let data = (0..n * dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![n, dim], data).expect("noise shape")
}

fn sample_images<'a>(rng: &mut ChaCha8Rng, pool: &'a [LabeledSample], n: usize) -> Vec<&'a LabeledSample> {
    (0..n).map(|_| &pool[rng.random_range(0..pool.len())]).collect()
}

fn batch_refs(samples: &[&LabeledSample]) -> Result<Tensor> {
    let res = samples[0].image.resolution();
    let rows: Vec<&[f32]> = samples.iter().map(|s| s.image.pixels()).collect();
    Tensor::stack_rows(&rows, &[1, res, res])
}

fn per_sample_seed(logits: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = logits.data().iter().map(|&l| f(l as f64) as f32).collect();
    Tensor::new(logits.shape().to_vec(), data).expect("seed shape")
}

fn add_grads(acc: &mut BTreeMap<String, Tensor>, other: BTreeMap<String, Tensor>) {
    for (k, g) in other {
        match acc.get_mut(&k) {
            Some(a) => a.add_assign(&g),
            None => {
                acc.insert(k, g);
            }
        }
    }
}

fn grads_finite(g: &BTreeMap<String, Tensor>) -> bool {
    g.values().all(Tensor::is_finite)
}

/// Generator forward with frozen parameters: `z -> G(mapping(z))`.
pub fn generate_from_noise(
    mapping: &NetworkParams,
    synthesis: &NetworkParams,
    spec: &GeneratorSpec,
    z: Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let pm = Bound::new(&mut g, mapping, &spec.mapping_layers_table(), false)?;
    let ps = Bound::new(&mut g, synthesis, &spec.synthesis_layers_table(), false)?;
    let zv = g.leaf(z, false);
    let w = mapping_graph(&mut g, &pm, spec, zv)?;
    let x = synthesis_graph(&mut g, &ps, spec, w)?;
    Ok((g.value(w).clone(), g.value(x).clone()))
}

/// Samples `n` generator images from a fixed noise stream.
pub fn sample_generator(
    mapping: &NetworkParams,
    synthesis: &NetworkParams,
    spec: &GeneratorSpec,
    n: usize,
    seed: u64,
) -> Result<(Vec<LatentVector>, Vec<ImageTensor>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &[TAG_EVAL]));
    let z = sample_noise(&mut rng, n, spec.noise_dim);
    let latents = nets::mapping_forward_batch(mapping, spec, &z)?;
    let images = nets::synthesis_forward_batch(synthesis, spec, &latents)?;
    Ok((latents, images))
}

/// Fraction of `n` generated samples on which [`synthdata::measure_gap`]
/// finds a joint.
pub fn measurable_fraction(
    mapping: &NetworkParams,
    synthesis: &NetworkParams,
    spec: &GeneratorSpec,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let (_, images) = sample_generator(mapping, synthesis, spec, n, seed)?;
    let ok = images
        .iter()
        .filter(|im| synthdata::measure_gap(im).is_measured())
        .count();
    Ok(ok as f64 / n as f64)
}

// --- GAN -------------------------------------------------------------------

pub struct GanTrainer<'a> {
    train: &'a [LabeledSample],
    pub g_spec: GeneratorSpec,
    pub d_spec: DiscriminatorSpec,
    pub config: TrainConfig,
    pub step: usize,
    pub mapping: NetworkParams,
    pub synthesis: NetworkParams,
    pub discriminator: NetworkParams,
    opt_mapping: Adam,
    opt_synthesis: Adam,
    opt_discriminator: Adam,
    pub progress: Progress,
}

/// Losses of a single adversarial step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanStepLosses {
    pub d_loss: f64,
    pub g_loss: f64,
    pub r1_penalty: f64,
}

pub struct GanOutcome {
    pub synthesis: NetworkParams,
    pub mapping: NetworkParams,
    pub discriminator: NetworkParams,
    pub report: TrainReport,
}

impl<'a> GanTrainer<'a> {
    pub fn new(
        dataset: &'a DatasetSplit,
        g_spec: GeneratorSpec,
        d_spec: DiscriminatorSpec,
        config: TrainConfig,
    ) -> Result<Self> {
        g_spec.validate()?;
        d_spec.validate()?;
        config.validate("gan")?;
        if dataset.train.is_empty() {
            return Err(LcxError::DegenerateData("empty training split".into()));
        }
        if dataset.resolution() != g_spec.resolution || d_spec.resolution != g_spec.resolution {
            return Err(LcxError::Config {
                path: "gan.resolution".into(),
                message: format!(
                    "dataset {}, generator {}, discriminator {} must agree",
                    dataset.resolution(),
                    g_spec.resolution,
                    d_spec.resolution
                ),
            });
        }
        let seed = config.seed;
        Ok(GanTrainer {
            train: &dataset.train,
            mapping: NetworkParams::init(&g_spec.mapping_layers_table(), stream_seed(seed, &[TAG_INIT, 0])),
            synthesis: NetworkParams::init(&g_spec.synthesis_layers_table(), stream_seed(seed, &[TAG_INIT, 1])),
            discriminator: NetworkParams::init(&d_spec.layers_table(), stream_seed(seed, &[TAG_INIT, 2])),
            opt_mapping: config.adam(),
            opt_synthesis: config.adam(),
            opt_discriminator: config.adam(),
            g_spec,
            d_spec,
            config,
            step: 0,
            progress: Progress::default(),
        })
    }

    pub fn from_checkpoint(
        dataset: &'a DatasetSplit,
        g_spec: GeneratorSpec,
        d_spec: DiscriminatorSpec,
        config: TrainConfig,
        mut ckpt: Checkpoint,
    ) -> Result<Self> {
        let mut t = GanTrainer::new(dataset, g_spec, d_spec, config)?;
        t.mapping = ckpt.take_net("mapping")?;
        t.synthesis = ckpt.take_net("synthesis")?;
        t.discriminator = ckpt.take_net("discriminator")?;
        t.mapping.check_layout(&t.g_spec.mapping_layers_table())?;
        t.synthesis.check_layout(&t.g_spec.synthesis_layers_table())?;
        t.discriminator.check_layout(&t.d_spec.layers_table())?;
        t.opt_mapping = ckpt.take_opt("mapping")?;
        t.opt_synthesis = ckpt.take_opt("synthesis")?;
        t.opt_discriminator = ckpt.take_opt("discriminator")?;
        t.step = ckpt.step;
        t.progress = ckpt.progress;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            nets: BTreeMap::from([
                ("mapping".into(), self.mapping.clone()),
                ("synthesis".into(), self.synthesis.clone()),
                ("discriminator".into(), self.discriminator.clone()),
            ]),
            optimizers: BTreeMap::from([
                ("mapping".into(), self.opt_mapping.clone()),
                ("synthesis".into(), self.opt_synthesis.clone()),
                ("discriminator".into(), self.opt_discriminator.clone()),
            ]),
            progress: self.progress.clone(),
        }
    }

    /// Discriminator parameter gradients of `sum_i seed_i * D(x_i)` plus the logits.
    fn d_param_grads(&self, x: Tensor, seed: impl Fn(f64) -> f64) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.discriminator, &self.d_spec.layers_table(), true)?;
        let xv = g.leaf(x, false);
        let logits = discriminator_graph(&mut g, &p, &self.d_spec, xv)?;
        let lv = g.value(logits).clone();
        let mut grads = g.backward(logits, per_sample_seed(&lv, seed))?;
        Ok((lv, p.grads(&mut grads)))
    }

    /// R1 penalty `gamma/2 * mean_i |grad_x D(x_i)|^2` and its parameter
    /// gradient, the latter via central differences of `grad_theta D` along
    /// each sample's own input gradient.
    pub fn r1_penalty(&self, reals: &Tensor) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let gamma = self.config.r1_gamma as f64;
        let b = reals.batch();
        let (gx, pattern) = {
            let mut g = Graph::new();
            let p = Bound::new(&mut g, &self.discriminator, &self.d_spec.layers_table(), false)?;
            let xv = g.leaf(reals.clone(), true);
            let (logits, pattern) = discriminator_graph_with(&mut g, &p, &self.d_spec, xv, None)?;
            let grads = g.backward(logits, Tensor::full(&[b, 1], 1.0))?;
            (grads.get(xv).expect("input grad").clone(), pattern)
        };
        let norms: Vec<f64> = (0..b)
            .map(|i| gx.item(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>())
            .collect();
        let penalty = 0.5 * gamma * norms.iter().sum::<f64>() / b as f64;
        if gamma == 0.0 {
            return Ok((0.0, BTreeMap::new()));
        }
        let steps: Vec<f32> = norms
            .iter()
            .map(|&n2| if n2 > 0.0 { R1_PROBE / n2.sqrt() as f32 } else { 0.0 })
            .collect();
        let item = reals.item_len();
        let mut probe = Vec::with_capacity(2 * b * item);
        for sign in [1.0f32, -1.0] {
            for (i, &h) in steps.iter().enumerate() {
                probe.extend(reals.item(i).iter().zip(gx.item(i)).map(|(&x, &d)| x + sign * h * d));
            }
        }
        let mut shape = reals.shape().to_vec();
        shape[0] = 2 * b;
        let probe = Tensor::new(shape, probe)?;
        let coef: Vec<f64> = steps
            .iter()
            .map(|&h| if h > 0.0 { gamma / (b as f64 * 2.0 * h as f64) } else { 0.0 })
            .collect();
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.discriminator, &self.d_spec.layers_table(), true)?;
        let xv = g.leaf(probe, false);
        let doubled: Vec<Tensor> = pattern
            .iter()
            .map(|t| {
                let mut shape = t.shape().to_vec();
                shape[0] *= 2;
                Tensor::new(shape, [t.data(), t.data()].concat())
            })
            .collect::<Result<_>>()?;
        let (logits, _) = discriminator_graph_with(&mut g, &p, &self.d_spec, xv, Some(&doubled))?;
        let seed_data: Vec<f32> = (0..2 * b)
            .map(|i| if i < b { coef[i] as f32 } else { -(coef[i - b] as f32) })
            .collect();
        let mut grads = g.backward(logits, Tensor::new(vec![2 * b, 1], seed_data)?)?;
        Ok((penalty, p.grads(&mut grads)))
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self) -> Result<GanStepLosses> {
        let bsz = self.config.batch_size;
        let mut rng = step_rng(self.config.seed, TAG_GAN, self.step);
        let reals = batch_refs(&sample_images(&mut rng, self.train, bsz))?;
        let z = sample_noise(&mut rng, bsz, self.g_spec.noise_dim);
        let z_gen = sample_noise(&mut rng, bsz, self.g_spec.noise_dim);
        let inv_b = 1.0 / bsz as f64;

        // Discriminator: softplus(D(fake)) + softplus(-D(real)) + R1.
        let (_, fakes) = generate_from_noise(&self.mapping, &self.synthesis, &self.g_spec, z)?;
        let (real_logits, mut d_grads) = self.d_param_grads(reals.clone(), |l| -sigmoid(-l) * inv_b)?;
        let (fake_logits, fake_grads) = self.d_param_grads(fakes, |l| sigmoid(l) * inv_b)?;
        add_grads(&mut d_grads, fake_grads);
        let d_loss = real_logits.data().iter().map(|&l| softplus(-(l as f64))).sum::<f64>() * inv_b
            + fake_logits.data().iter().map(|&l| softplus(l as f64)).sum::<f64>() * inv_b;
        let (r1_penalty, r1_grads) = self.r1_penalty(&reals)?;
        add_grads(&mut d_grads, r1_grads);
        if !d_loss.is_finite() || !r1_penalty.is_finite() || !grads_finite(&d_grads) {
            return Err(self.failure(format!("non-finite discriminator loss {d_loss}")));
        }
        self.opt_discriminator.update(&mut self.discriminator, &d_grads)?;

        // Generator: softplus(-D(G(z))).
        let (g_loss, map_grads, syn_grads) = {
            let mut g = Graph::new();
            let pm = Bound::new(&mut g, &self.mapping, &self.g_spec.mapping_layers_table(), true)?;
            let ps = Bound::new(&mut g, &self.synthesis, &self.g_spec.synthesis_layers_table(), true)?;
            let pd = Bound::new(&mut g, &self.discriminator, &self.d_spec.layers_table(), false)?;
            let zv = g.leaf(z_gen, false);
            let w = mapping_graph(&mut g, &pm, &self.g_spec, zv)?;
            let x = synthesis_graph(&mut g, &ps, &self.g_spec, w)?;
            let logits = discriminator_graph(&mut g, &pd, &self.d_spec, x)?;
            let lv = g.value(logits).clone();
            let loss = lv.data().iter().map(|&l| softplus(-(l as f64))).sum::<f64>() * inv_b;
            let mut grads = g.backward(logits, per_sample_seed(&lv, |l| -sigmoid(-l) * inv_b))?;
            (loss, pm.grads(&mut grads), ps.grads(&mut grads))
        };
        if !g_loss.is_finite() || !grads_finite(&map_grads) || !grads_finite(&syn_grads) {
            return Err(self.failure(format!("non-finite generator loss {g_loss}")));
        }
        self.opt_mapping.update(&mut self.mapping, &map_grads)?;
        self.opt_synthesis.update(&mut self.synthesis, &syn_grads)?;

        self.step += 1;
        self.progress.low_d_streak = if d_loss < DIVERGENCE_LOSS {
            self.progress.low_d_streak + 1
        } else {
            0
        };
        self.progress.record("d_loss", d_loss);
        self.progress.record("g_loss", g_loss);
        self.progress.record("r1_penalty", r1_penalty);
        Ok(GanStepLosses {
            d_loss,
            g_loss,
            r1_penalty,
        })
    }

    fn failure(&self, reason: String) -> LcxError {
        LcxError::TrainingFailure {
            step: self.step,
            reason,
            last_checkpoint: None,
        }
    }

    /// Trains until `target` completed steps, checkpointing into `ckpt_root`.
    pub fn run_until(&mut self, target: usize, ckpt_root: Option<&Path>) -> Result<()> {
        let mut last_ckpt = ckpt_root.and_then(Checkpoint::latest);
        while self.step < target.min(self.config.steps) {
            let outcome = self.train_step().and_then(|_| {
                if self.progress.low_d_streak >= DIVERGENCE_PATIENCE {
                    Err(self.failure(format!(
                        "discriminator loss below {DIVERGENCE_LOSS:e} for {DIVERGENCE_PATIENCE} consecutive steps"
                    )))
                } else {
                    Ok(())
                }
            });
            if let Err(mut e) = outcome {
                if let LcxError::TrainingFailure { last_checkpoint, .. } = &mut e {
                    *last_checkpoint = last_ckpt.clone();
                }
                return Err(e);
            }
            if self.step % self.config.eval_every == 0 || self.step == self.config.steps {
                self.progress.flush(self.step);
            }
            if let Some(root) = ckpt_root {
                if self.step % self.config.checkpoint_every == 0 || self.step == self.config.steps {
                    last_ckpt = Some(self.checkpoint().save(root)?);
                }
            }
        }
        Ok(())
    }

    pub fn finish(self, wall_time_s: f64) -> Result<GanOutcome> {
        let mut final_metrics = BTreeMap::new();
        final_metrics.insert(
            "measurable_fraction".into(),
            measurable_fraction(&self.mapping, &self.synthesis, &self.g_spec, QUALITY_SAMPLES, self.config.seed)?,
        );
        for name in ["d_loss", "g_loss", "r1_penalty"] {
            if let Some(v) = self.progress.last(name) {
                final_metrics.insert(name.into(), v);
            }
        }
        Ok(GanOutcome {
            report: TrainReport {
                loss_curves: self.progress.curves,
                final_metrics,
                wall_time_s,
                seed: self.config.seed,
            },
            synthesis: self.synthesis,
            mapping: self.mapping,
            discriminator: self.discriminator,
        })
    }
}

/// Trains the style generator adversarially; returns `(synthesis, mapping, report)`.
pub fn train_gan(
    dataset: &DatasetSplit,
    g_spec: &GeneratorSpec,
    config: &TrainConfig,
) -> Result<(NetworkParams, NetworkParams, TrainReport)> {
    let d_spec = DiscriminatorSpec {
        resolution: g_spec.resolution,
        ..DiscriminatorSpec::default()
    };
    let out = train_gan_with(dataset, g_spec, &d_spec, config, None)?;
    Ok((out.synthesis, out.mapping, out.report))
}

pub fn train_gan_with(
    dataset: &DatasetSplit,
    g_spec: &GeneratorSpec,
    d_spec: &DiscriminatorSpec,
    config: &TrainConfig,
    ckpt_root: Option<&Path>,
) -> Result<GanOutcome> {
    let start = Instant::now();
    let mut trainer = match ckpt_root.and_then(Checkpoint::latest) {
        Some(dir) => GanTrainer::from_checkpoint(dataset, g_spec.clone(), d_spec.clone(), config.clone(), Checkpoint::load(&dir)?)?,
        None => GanTrainer::new(dataset, g_spec.clone(), d_spec.clone(), config.clone())?,
    };
    trainer.run_until(config.steps, ckpt_root)?;
    trainer.finish(start.elapsed().as_secs_f64())
}

// --- encoder ---------------------------------------------------------------

pub struct EncoderTrainer<'a> {
    mapping: &'a NetworkParams,
    synthesis: &'a NetworkParams,
    pub g_spec: GeneratorSpec,
    pub e_spec: EncoderSpec,
    pub config: TrainConfig,
    pub step: usize,
    pub encoder: NetworkParams,
    opt: Adam,
    pub progress: Progress,
}

/// Held-out inversion quality of an encoder against a generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionMetrics {
    pub median_relative_error: f64,
    pub median_psnr: f64,
}

pub fn inversion_metrics(
    mapping: &NetworkParams,
    synthesis: &NetworkParams,
    g_spec: &GeneratorSpec,
    encoder: &NetworkParams,
    e_spec: &EncoderSpec,
    n: usize,
    seed: u64,
) -> Result<InversionMetrics> {
    let (latents, images) = sample_generator(mapping, synthesis, g_spec, n, stream_seed(seed, &[TAG_ENCODER]))?;
    let recovered = nets::encoder_forward_batch(encoder, e_spec, &images)?;
    let rebuilt = nets::synthesis_forward_batch(synthesis, g_spec, &recovered)?;
    let rel: Vec<f64> = latents
        .iter()
        .zip(&recovered)
        .map(|(w, e)| {
            let diff: f64 = w
                .as_slice()
                .iter()
                .zip(e.as_slice())
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            diff / w.norm().max(1e-12)
        })
        .collect();
    let psnr: Vec<f64> = images.iter().zip(&rebuilt).map(|(a, b)| metrics::psnr(a, b)).collect();
    Ok(InversionMetrics {
        median_relative_error: metrics::median(&rel).unwrap_or(f64::NAN),
        median_psnr: metrics::median(&psnr).unwrap_or(f64::NAN),
    })
}

impl<'a> EncoderTrainer<'a> {
    pub fn new(
        mapping: &'a NetworkParams,
        synthesis: &'a NetworkParams,
        g_spec: GeneratorSpec,
        e_spec: EncoderSpec,
        config: TrainConfig,
    ) -> Result<Self> {
        e_spec.validate()?;
        config.validate("encoder")?;
        if e_spec.latent_dim != g_spec.latent_dim {
            return Err(LcxError::Config {
                path: "encoder.latent_dim".into(),
                message: format!(
                    "encoder latent_dim {} does not match generator latent_dim {}",
                    e_spec.latent_dim, g_spec.latent_dim
                ),
            });
        }
        if e_spec.resolution != g_spec.resolution {
            return Err(LcxError::Config {
                path: "encoder.resolution".into(),
                message: "encoder and generator resolutions differ".into(),
            });
        }
        mapping.check_layout(&g_spec.mapping_layers_table())?;
        synthesis.check_layout(&g_spec.synthesis_layers_table())?;
        Ok(EncoderTrainer {
            mapping,
            synthesis,
            encoder: NetworkParams::init(&e_spec.layers_table(), stream_seed(config.seed, &[TAG_INIT, 3])),
            opt: config.adam(),
            g_spec,
            e_spec,
            config,
            step: 0,
            progress: Progress::default(),
        })
    }

    pub fn from_checkpoint(
        mapping: &'a NetworkParams,
        synthesis: &'a NetworkParams,
        g_spec: GeneratorSpec,
        e_spec: EncoderSpec,
        config: TrainConfig,
        mut ckpt: Checkpoint,
    ) -> Result<Self> {
        let mut t = EncoderTrainer::new(mapping, synthesis, g_spec, e_spec, config)?;
        t.encoder = ckpt.take_net("encoder")?;
        t.encoder.check_layout(&t.e_spec.layers_table())?;
        t.opt = ckpt.take_opt("encoder")?;
        t.step = ckpt.step;
        t.progress = ckpt.progress;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            nets: BTreeMap::from([("encoder".into(), self.encoder.clone())]),
            optimizers: BTreeMap::from([("encoder".into(), self.opt.clone())]),
            progress: self.progress.clone(),
        }
    }

    /// The synthetic pairs `(w, G(w))` drawn at `step`.
    pub fn batch(&self, step: usize) -> Result<(Tensor, Tensor)> {
        let mut rng = step_rng(self.config.seed, TAG_ENCODER, step);
        let z = sample_noise(&mut rng, self.config.batch_size, self.g_spec.noise_dim);
        generate_from_noise(self.mapping, self.synthesis, &self.g_spec, z)
    }

    /// One MSE step; returns the pre-update batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let (w, x) = self.batch(self.step)?;
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.encoder, &self.e_spec.layers_table(), true)?;
        let xv = g.leaf(x, false);
        let pred = encoder_graph(&mut g, &p, &self.e_spec, xv)?;
        let count = w.numel() as f64;
        let mut loss = 0.0f64;
        let seed: Vec<f32> = g
            .value(pred)
            .data()
            .iter()
            .zip(w.data())
            .map(|(&e, &t)| {
                let d = e as f64 - t as f64;
                loss += d * d;
                (2.0 * d / count) as f32
            })
            .collect();
        loss /= count;
        let mut grads = g.backward(pred, Tensor::new(w.shape().to_vec(), seed)?)?;
        let grads = p.grads(&mut grads);
        if !loss.is_finite() || !grads_finite(&grads) {
            return Err(LcxError::TrainingFailure {
                step: self.step,
                reason: format!("non-finite encoder loss {loss}"),
                last_checkpoint: None,
            });
        }
        self.opt.update(&mut self.encoder, &grads)?;
        self.step += 1;
        self.progress.record("mse", loss);
        Ok(loss)
    }

    pub fn run_until(&mut self, target: usize, ckpt_root: Option<&Path>) -> Result<()> {
        while self.step < target.min(self.config.steps) {
            self.train_step()?;
            if self.step % self.config.eval_every == 0 || self.step == self.config.steps {
                self.progress.flush(self.step);
            }
            if let Some(root) = ckpt_root {
                if self.step % self.config.checkpoint_every == 0 || self.step == self.config.steps {
                    self.checkpoint().save(root)?;
                }
            }
        }
        Ok(())
    }

    pub fn evaluate(&self) -> Result<InversionMetrics> {
        inversion_metrics(
            self.mapping,
            self.synthesis,
            &self.g_spec,
            &self.encoder,
            &self.e_spec,
            ENCODER_EVAL_SAMPLES,
            self.config.seed,
        )
    }
}

/// Trains the encoder `E: X -> W` on fresh `(w, G(w))` pairs with MSE.
pub fn train_encoder(
    synthesis: &NetworkParams,
    mapping: &NetworkParams,
    g_spec: &GeneratorSpec,
    e_spec: &EncoderSpec,
    config: &TrainConfig,
) -> Result<(NetworkParams, TrainReport)> {
    train_encoder_with(synthesis, mapping, g_spec, e_spec, config, None)
}

pub fn train_encoder_with(
    synthesis: &NetworkParams,
    mapping: &NetworkParams,
    g_spec: &GeneratorSpec,
    e_spec: &EncoderSpec,
    config: &TrainConfig,
    ckpt_root: Option<&Path>,
) -> Result<(NetworkParams, TrainReport)> {
    let start = Instant::now();
    let mut trainer = match ckpt_root.and_then(Checkpoint::latest) {
        Some(dir) => EncoderTrainer::from_checkpoint(
            mapping,
            synthesis,
            g_spec.clone(),
            e_spec.clone(),
            config.clone(),
            Checkpoint::load(&dir)?,
        )?,
        None => EncoderTrainer::new(mapping, synthesis, g_spec.clone(), e_spec.clone(), config.clone())?,
    };
    let initial = if trainer.step == 0 { Some(trainer.evaluate()?) } else { None };
    trainer.run_until(config.steps, ckpt_root)?;
    let fin = trainer.evaluate()?;
    let mut final_metrics = BTreeMap::from([
        ("median_relative_latent_error".to_string(), fin.median_relative_error),
        ("median_reconstruction_psnr".to_string(), fin.median_psnr),
    ]);
    if let Some(init) = initial {
        final_metrics.insert("initial_relative_latent_error".into(), init.median_relative_error);
    }
    if let Some(v) = trainer.progress.last("mse") {
        final_metrics.insert("mse".into(), v);
    }
    Ok((
        trainer.encoder,
        TrainReport {
            loss_curves: trainer.progress.curves,
            final_metrics,
            wall_time_s: start.elapsed().as_secs_f64(),
            seed: config.seed,
        },
    ))
}

// --- classifier ------------------------------------------------------------

pub struct ClassifierTrainer<'a> {
    dataset: &'a DatasetSplit,
    pub c_spec: ClassifierSpec,
    pub config: TrainConfig,
    pub step: usize,
    pub classifier: NetworkParams,
    opt: Adam,
    pub progress: Progress,
}

impl<'a> ClassifierTrainer<'a> {
    pub fn new(dataset: &'a DatasetSplit, c_spec: ClassifierSpec, config: TrainConfig) -> Result<Self> {
        c_spec.validate()?;
        config.validate("classifier")?;
        let labels: Vec<u8> = dataset.train.iter().map(|s| s.label).collect();
        if !labels.contains(&0) || !labels.contains(&1) {
            return Err(LcxError::DegenerateData(
                "training split contains a single class".into(),
            ));
        }
        if dataset.resolution() != c_spec.resolution {
            return Err(LcxError::Config {
                path: "classifier.resolution".into(),
                message: format!("dataset is {}, classifier expects {}", dataset.resolution(), c_spec.resolution),
            });
        }
        Ok(ClassifierTrainer {
            dataset,
            classifier: NetworkParams::init(&c_spec.layers_table(), stream_seed(config.seed, &[TAG_INIT, 4])),
            opt: config.adam(),
            c_spec,
            config,
            step: 0,
            progress: Progress::default(),
        })
    }

    pub fn from_checkpoint(
        dataset: &'a DatasetSplit,
        c_spec: ClassifierSpec,
        config: TrainConfig,
        mut ckpt: Checkpoint,
    ) -> Result<Self> {
        let mut t = ClassifierTrainer::new(dataset, c_spec, config)?;
        t.classifier = ckpt.take_net("classifier")?;
        t.classifier.check_layout(&t.c_spec.layers_table())?;
        t.opt = ckpt.take_opt("classifier")?;
        t.step = ckpt.step;
        t.progress = ckpt.progress;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            nets: BTreeMap::from([("classifier".into(), self.classifier.clone())]),
            optimizers: BTreeMap::from([("classifier".into(), self.opt.clone())]),
            progress: self.progress.clone(),
        }
    }

    pub fn train_step(&mut self) -> Result<f64> {
        let mut rng = step_rng(self.config.seed, TAG_CLASSIFIER, self.step);
        let picks = sample_images(&mut rng, &self.dataset.train, self.config.batch_size);
        let targets: Vec<f64> = picks.iter().map(|s| s.label as f64).collect();
        let x = batch_refs(&picks)?;
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.classifier, &self.c_spec.layers_table(), true)?;
        let xv = g.leaf(x, false);
        let out = classifier_graph(&mut g, &p, &self.c_spec, xv)?;
        let lv = g.value(out.logits).clone();
        let inv_b = 1.0 / targets.len() as f64;
        let mut loss = 0.0;
        let mut seed = Vec::with_capacity(targets.len());
        for (&l, &y) in lv.data().iter().zip(&targets) {
            let l = l as f64;
            loss += (softplus(l) - y * l) * inv_b;
            seed.push(((sigmoid(l) - y) * inv_b) as f32);
        }
        let mut grads = g.backward(out.logits, Tensor::new(lv.shape().to_vec(), seed)?)?;
        let grads = p.grads(&mut grads);
        if !loss.is_finite() || !grads_finite(&grads) {
            return Err(LcxError::TrainingFailure {
                step: self.step,
                reason: format!("non-finite classifier loss {loss}"),
                last_checkpoint: None,
            });
        }
        self.opt.update(&mut self.classifier, &grads)?;
        self.step += 1;
        self.progress.record("bce", loss);
        Ok(loss)
    }

    pub fn split_auc(&self, samples: &[LabeledSample]) -> Result<f64> {
        let images: Vec<ImageTensor> = samples.iter().map(|s| s.image.clone()).collect();
        let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
        let scores = nets::classifier_logits(&self.classifier, &self.c_spec, &images)?;
        metrics::auc(&scores, &labels)
    }

    pub fn run_until(&mut self, target: usize, ckpt_root: Option<&Path>) -> Result<()> {
        while self.step < target.min(self.config.steps) {
            self.train_step()?;
            if self.step % self.config.eval_every == 0 || self.step == self.config.steps {
                self.progress.flush(self.step);
            }
            if let Some(root) = ckpt_root {
                if self.step % self.config.checkpoint_every == 0 || self.step == self.config.steps {
                    self.checkpoint().save(root)?;
                }
            }
        }
        Ok(())
    }
}

/// Trains the black-box classifier with binary cross-entropy.
pub fn train_classifier(
    dataset: &DatasetSplit,
    c_spec: &ClassifierSpec,
    config: &TrainConfig,
) -> Result<(NetworkParams, TrainReport)> {
    train_classifier_with(dataset, c_spec, config, None)
}

pub fn train_classifier_with(
    dataset: &DatasetSplit,
    c_spec: &ClassifierSpec,
    config: &TrainConfig,
    ckpt_root: Option<&Path>,
) -> Result<(NetworkParams, TrainReport)> {
    let start = Instant::now();
    let mut trainer = match ckpt_root.and_then(Checkpoint::latest) {
        Some(dir) => ClassifierTrainer::from_checkpoint(dataset, c_spec.clone(), config.clone(), Checkpoint::load(&dir)?)?,
        None => ClassifierTrainer::new(dataset, c_spec.clone(), config.clone())?,
    };
    trainer.run_until(config.steps, ckpt_root)?;
    let mut final_metrics = BTreeMap::new();
    for (name, split) in [("val_auc", &dataset.val), ("test_auc", &dataset.test)] {
        if let Ok(a) = trainer.split_auc(split) {
            final_metrics.insert(name.to_string(), a);
        }
    }
    if let Some(v) = trainer.progress.last("bce") {
        final_metrics.insert("bce".into(), v);
    }
    Ok((
        trainer.classifier,
        TrainReport {
            loss_curves: trainer.progress.curves,
            final_metrics,
            wall_time_s: start.elapsed().as_secs_f64(),
            seed: config.seed,
        },
    ))
}
