//! Architectures for the mapping network, style-modulated synthesis network,
//! discriminator, encoder and black-box classifier.
//!
//! Parameters use equalized learning rate: stored weights are unit-variance
//! and the fan-in scale is applied at forward time, so one Adam step size
//! suits every layer.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LcxError, Result};
use crate::graph::{Grads, Graph, Var};
use crate::tensor::{ImageTensor, LatentVector, Tensor};

const LRELU_SLOPE: f32 = 0.2;
const LRELU_GAIN: f32 = std::f32::consts::SQRT_2;
/// Forward passes are chunked to bound im2col memory.
const INFER_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub noise_dim: usize,
    pub latent_dim: usize,
    pub mapping_layers: usize,
    pub base_channels: usize,
    pub resolution: usize,
    #[serde(default = "default_mapping_lr_mul")]
    pub mapping_lr_mul: f32,
}

fn default_mapping_lr_mul() -> f32 {
    0.1
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            noise_dim: 64,
            latent_dim: 64,
            mapping_layers: 4,
            base_channels: 32,
            resolution: 64,
            mapping_lr_mul: default_mapping_lr_mul(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub base_channels: usize,
    pub resolution: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            base_channels: 8,
            resolution: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub latent_dim: usize,
    pub conv_blocks: usize,
    pub base_channels: usize,
    pub resolution: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            latent_dim: 64,
            conv_blocks: 4,
            base_channels: 8,
            resolution: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub conv_blocks: usize,
    pub base_channels: usize,
    pub resolution: usize,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec {
            conv_blocks: 4,
            base_channels: 8,
            resolution: 64,
        }
    }
}

fn check_resolution(res: usize, min: usize) -> Result<u32> {
    if !res.is_power_of_two() || res < min {
        return Err(LcxError::Config {
            path: "resolution".into(),
            message: format!("must be a power of two >= {min}, got {res}"),
        });
    }
    Ok(res.trailing_zeros())
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        check_resolution(self.resolution, 8)?;
        if self.noise_dim == 0 || self.latent_dim == 0 || self.mapping_layers == 0 || self.base_channels == 0 {
            return Err(LcxError::Config {
                path: "generator".into(),
                message: "dimensions and layer counts must be positive".into(),
            });
        }
        if self.latent_dim > 512 {
            return Err(LcxError::Config {
                path: "generator.latent_dim".into(),
                message: format!("at most 512 supported, got {}", self.latent_dim),
            });
        }
        Ok(())
    }

    /// Number of 2x upsampling blocks from the 4x4 input.
    pub fn blocks(&self) -> usize {
        self.resolution.trailing_zeros() as usize - 2
    }

    /// Feature channels after block `b` (0 is the 4x4 input).
    pub fn channels(&self, b: usize) -> usize {
        (self.base_channels >> b.saturating_sub(1)).max(8.min(self.base_channels))
    }

    pub fn mapping_layers_table(&self) -> Vec<Layer> {
        (0..self.mapping_layers)
            .map(|l| {
                let fan_in = if l == 0 { self.noise_dim } else { self.latent_dim };
                let last = l + 1 == self.mapping_layers;
                Layer::dense(&format!("fc{l}"), fan_in, self.latent_dim, if last { 1.0 } else { LRELU_GAIN })
                    .with_lr_mul(self.mapping_lr_mul)
            })
            .collect()
    }

    pub fn synthesis_layers_table(&self) -> Vec<Layer> {
        let d = self.latent_dim;
        let c0 = self.channels(0);
        let mut layers = vec![Layer::dense("input", d, c0 * 16, LRELU_GAIN)];
        for b in 1..=self.blocks() {
            let (ci, co) = (self.channels(b - 1), self.channels(b));
            layers.push(Layer::dense(&format!("block{b}.style"), d, ci, 0.25).with_bias_init(1.0));
            layers.push(Layer::conv(&format!("block{b}.conv"), ci, co, 3, LRELU_GAIN));
        }
        let cl = self.channels(self.blocks());
        layers.push(Layer::dense("torgb.style", d, cl, 0.25).with_bias_init(1.0));
        layers.push(Layer::conv("torgb.conv", cl, 1, 1, 1.0));
        layers
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        check_resolution(self.resolution, 8)?;
        if self.base_channels == 0 {
            return Err(LcxError::Config {
                path: "discriminator.base_channels".into(),
                message: "must be positive".into(),
            });
        }
        Ok(())
    }

    fn levels(&self) -> usize {
        self.resolution.trailing_zeros() as usize - 2
    }

    fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(8 * self.base_channels)
    }

    pub fn layers_table(&self) -> Vec<Layer> {
        let mut layers = vec![Layer::conv("from_rgb", 1, self.channels(0), 1, LRELU_GAIN)];
        for l in 0..self.levels() {
            layers.push(Layer::conv(
                &format!("down{l}"),
                self.channels(l),
                self.channels(l + 1),
                3,
                LRELU_GAIN,
            ));
        }
        let c = self.channels(self.levels());
        layers.push(Layer::dense("fc", c * 16, c, LRELU_GAIN));
        layers.push(Layer::dense("out", c, 1, 1.0));
        layers
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        let log = check_resolution(self.resolution, 8)? as usize;
        if self.conv_blocks == 0 || self.conv_blocks > log || self.base_channels == 0 || self.latent_dim == 0 {
            return Err(LcxError::Config {
                path: "encoder".into(),
                message: format!(
                    "conv_blocks must be in 1..={log} and channels/latent_dim positive"
                ),
            });
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(8 * self.base_channels)
    }

    pub fn layers_table(&self) -> Vec<Layer> {
        let mut layers = vec![Layer::conv("stem", 1, self.channels(0), 3, LRELU_GAIN)];
        for l in 0..self.conv_blocks {
            layers.push(Layer::conv(
                &format!("down{l}"),
                self.channels(l),
                self.channels(l + 1),
                3,
                LRELU_GAIN,
            ));
        }
        let side = self.resolution >> self.conv_blocks;
        let c = self.channels(self.conv_blocks);
        layers.push(Layer::dense("out", c * side * side, self.latent_dim, 1.0));
        layers
    }
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        check_resolution(self.resolution, 8)?;
        if self.conv_blocks == 0 || self.base_channels == 0 {
            return Err(LcxError::Config {
                path: "classifier".into(),
                message: "conv_blocks and base_channels must be positive".into(),
            });
        }
        Ok(())
    }

    fn block_stride(&self, b: usize) -> usize {
        if b == 1 {
            2
        } else {
            1
        }
    }

    fn block_channels(&self, b: usize) -> usize {
        if b == 0 {
            self.base_channels
        } else {
            2 * self.base_channels
        }
    }

    /// Name of the last convolutional feature map, the default GradCAM layer.
    pub fn last_block(&self) -> String {
        format!("block{}", self.conv_blocks)
    }

    pub fn feature_layers(&self) -> Vec<String> {
        std::iter::once("stem".to_string())
            .chain((1..=self.conv_blocks).map(|b| format!("block{b}")))
            .collect()
    }

    pub fn layers_table(&self) -> Vec<Layer> {
        let mut layers = vec![Layer::conv("stem", 1, self.base_channels, 3, LRELU_GAIN)];
        for b in 1..=self.conv_blocks {
            let (ci, co) = (self.block_channels(b - 1), self.block_channels(b));
            layers.push(Layer::conv(&format!("block{b}.conv1"), ci, co, 3, LRELU_GAIN));
            layers.push(Layer::conv(&format!("block{b}.conv2"), co, co, 3, LRELU_GAIN));
            if ci != co || self.block_stride(b) != 1 {
                layers.push(Layer::conv(&format!("block{b}.skip"), ci, co, 1, 1.0));
            }
        }
        layers.push(Layer::dense("head", self.block_channels(self.conv_blocks), 1, 1.0));
        layers
    }
}

/// One weight-bearing layer: a dense map or a square convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub weight_shape: Vec<usize>,
    pub fan_in: usize,
    pub gain: f32,
    pub lr_mul: f32,
    pub bias_init: f32,
}

impl Layer {
    fn dense(name: &str, fan_in: usize, out: usize, gain: f32) -> Self {
        Layer {
            name: name.into(),
            weight_shape: vec![out, fan_in],
            fan_in,
            gain,
            lr_mul: 1.0,
            bias_init: 0.0,
        }
    }

    fn conv(name: &str, c_in: usize, c_out: usize, k: usize, gain: f32) -> Self {
        Layer {
            name: name.into(),
            weight_shape: vec![c_out, c_in, k, k],
            fan_in: c_in * k * k,
            gain,
            lr_mul: 1.0,
            bias_init: 0.0,
        }
    }

    fn with_lr_mul(mut self, lr_mul: f32) -> Self {
        self.lr_mul = lr_mul;
        self
    }

    fn with_bias_init(mut self, b: f32) -> Self {
        self.bias_init = b;
        self
    }

    fn out_dim(&self) -> usize {
        self.weight_shape[0]
    }

    pub fn weight_scale(&self) -> f32 {
        self.gain * self.lr_mul / (self.fan_in as f32).sqrt()
    }

    pub fn weight_key(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_key(&self) -> String {
        format!("{}.bias", self.name)
    }
}

/// Named flat parameter arrays of one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub arrays: BTreeMap<String, Tensor>,
    pub init_seed: u64,
}

impl NetworkParams {
    pub fn init(layers: &[Layer], init_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut arrays = BTreeMap::new();
        for layer in layers {
            let numel: usize = layer.weight_shape.iter().product();
            let w: Vec<f32> = (0..numel)
                .map(|_| {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    z / layer.lr_mul
                })
                .collect();
            arrays.insert(
                layer.weight_key(),
                Tensor::new(layer.weight_shape.clone(), w).expect("layer shape"),
            );
            arrays.insert(
                layer.bias_key(),
                Tensor::full(&[layer.out_dim()], layer.bias_init / layer.lr_mul),
            );
        }
        NetworkParams { arrays, init_seed }
    }

    pub fn param_count(&self) -> usize {
        self.arrays.values().map(Tensor::numel).sum()
    }

    pub fn shape_table(&self) -> BTreeMap<String, Vec<usize>> {
        self.arrays
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    pub fn get(&self, key: &str) -> Result<&Tensor> {
        self.arrays
            .get(key)
            .ok_or_else(|| LcxError::shape(format!("missing parameter array `{key}`")))
    }

    pub fn get_mut(&mut self, key: &str) -> Result<&mut Tensor> {
        self.arrays
            .get_mut(key)
            .ok_or_else(|| LcxError::shape(format!("missing parameter array `{key}`")))
    }

    /// Checks keys and shapes against a layer table.
    pub fn check_layout(&self, layers: &[Layer]) -> Result<()> {
        let mut expected = BTreeMap::new();
        for l in layers {
            expected.insert(l.weight_key(), l.weight_shape.clone());
            expected.insert(l.bias_key(), vec![l.out_dim()]);
        }
        if expected != self.shape_table() {
            return Err(LcxError::shape(
                "parameter arrays do not match the network specification",
            ));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.values().all(Tensor::is_finite)
    }
}

/// Parameters of one network recorded as graph leaves.
pub struct Bound {
    layers: BTreeMap<String, (Layer, Var, Var)>,
}

impl Bound {
    pub fn new(g: &mut Graph, params: &NetworkParams, layers: &[Layer], trainable: bool) -> Result<Self> {
        params.check_layout(layers)?;
        let mut map = BTreeMap::new();
        for l in layers {
            let w = g.leaf(params.get(&l.weight_key())?.clone(), trainable);
            let b = g.leaf(params.get(&l.bias_key())?.clone(), trainable);
            map.insert(l.name.clone(), (l.clone(), w, b));
        }
        Ok(Bound { layers: map })
    }

    fn entry(&self, name: &str) -> Result<&(Layer, Var, Var)> {
        self.layers
            .get(name)
            .ok_or_else(|| LcxError::LayerLookup(name.to_string()))
    }

    fn scaled(&self, g: &mut Graph, name: &str) -> Result<(Var, Var)> {
        let (layer, w, b) = self.entry(name)?;
        let ws = g.scale(*w, layer.weight_scale());
        let bs = g.scale(*b, layer.lr_mul);
        Ok((ws, bs))
    }

    pub fn dense(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let (w, b) = self.scaled(g, name)?;
        g.linear(x, w, b)
    }

    pub fn conv(&self, g: &mut Graph, name: &str, x: Var, stride: usize) -> Result<Var> {
        let k = self.entry(name)?.0.weight_shape[2];
        let (w, b) = self.scaled(g, name)?;
        g.conv2d(x, w, b, stride, k / 2)
    }

    /// Collects parameter gradients keyed like [`NetworkParams::arrays`].
    pub fn grads(&self, grads: &mut Grads) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (layer, w, b) in self.layers.values() {
            let wg = grads.take(*w).unwrap_or_else(|| Tensor::zeros(&layer.weight_shape));
            let bg = grads.take(*b).unwrap_or_else(|| Tensor::zeros(&[layer.out_dim()]));
            out.insert(layer.weight_key(), wg);
            out.insert(layer.bias_key(), bg);
        }
        out
    }
}

fn expect_shape(g: &Graph, x: Var, tail: &[usize], what: &str) -> Result<()> {
    let s = g.shape(x);
    if s.len() != tail.len() + 1 || s[1..] != *tail {
        return Err(LcxError::shape(format!(
            "{what}: expected [N, {tail:?}], got {s:?}"
        )));
    }
    Ok(())
}

// --- graph builders --------------------------------------------------------

pub fn mapping_graph(g: &mut Graph, p: &Bound, spec: &GeneratorSpec, z: Var) -> Result<Var> {
    expect_shape(g, z, &[spec.noise_dim], "mapping input")?;
    let mut x = z;
    for l in 0..spec.mapping_layers {
        x = p.dense(g, &format!("fc{l}"), x)?;
        if l + 1 < spec.mapping_layers {
            x = g.leaky_relu(x, LRELU_SLOPE);
        }
    }
    Ok(x)
}

pub fn synthesis_graph(g: &mut Graph, p: &Bound, spec: &GeneratorSpec, w: Var) -> Result<Var> {
    expect_shape(g, w, &[spec.latent_dim], "synthesis input")?;
    let n = g.shape(w)[0];
    let x = p.dense(g, "input", w)?;
    let x = g.reshape(x, &[n, spec.channels(0), 4, 4])?;
    let mut x = g.leaky_relu(x, LRELU_SLOPE);
    for b in 1..=spec.blocks() {
        let s = p.dense(g, &format!("block{b}.style"), w)?;
        x = g.modulate(x, s)?;
        x = g.upsample2x(x)?;
        x = p.conv(g, &format!("block{b}.conv"), x, 1)?;
        x = g.leaky_relu(x, LRELU_SLOPE);
    }
    let s = p.dense(g, "torgb.style", w)?;
    let x = g.modulate(x, s)?;
    let x = p.conv(g, "torgb.conv", x, 1)?;
    Ok(g.tanh(x))
}

/// Returns `[N, 1]` logits.
pub fn discriminator_graph(g: &mut Graph, p: &Bound, spec: &DiscriminatorSpec, x: Var) -> Result<Var> {
    discriminator_graph_with(g, p, spec, x, None).map(|(logits, _)| logits)
}

/// Per-element slopes (`1` or the leak) of every discriminator activation.
pub type ActivationPattern = Vec<Tensor>;

/// The discriminator with its activation pattern exposed. With `frozen`,
/// each activation applies the given slopes instead of its own, which makes
/// the network exactly linear in `x` around the pattern's source input.
pub fn discriminator_graph_with(
    g: &mut Graph,
    p: &Bound,
    spec: &DiscriminatorSpec,
    x: Var,
    frozen: Option<&[Tensor]>,
) -> Result<(Var, ActivationPattern)> {
    let r = spec.resolution;
    expect_shape(g, x, &[1, r, r], "discriminator input")?;
    let n = g.shape(x)[0];
    let mut pattern = Vec::new();
    let mut act = |g: &mut Graph, h: Var| -> Result<Var> {
        let k = pattern.len();
        let slopes = match frozen {
            Some(f) => f.get(k).cloned().ok_or_else(|| LcxError::shape("frozen pattern is too short"))?,
            None => {
                let mut t = g.value(h).clone();
                for v in t.data_mut() {
                    *v = if *v < 0.0 { LRELU_SLOPE } else { 1.0 };
                }
                t
            }
        };
        pattern.push(slopes.clone());
        if frozen.is_some() {
            g.mul_const(h, slopes)
        } else {
            Ok(g.leaky_relu(h, LRELU_SLOPE))
        }
    };
    let h = p.conv(g, "from_rgb", x, 1)?;
    let mut h = act(g, h)?;
    for l in 0..spec.levels() {
        h = p.conv(g, &format!("down{l}"), h, 2)?;
        h = act(g, h)?;
    }
    let c = spec.channels(spec.levels());
    let h = g.reshape(h, &[n, c * 16])?;
    let h = p.dense(g, "fc", h)?;
    let h = act(g, h)?;
    Ok((p.dense(g, "out", h)?, pattern))
}

pub fn encoder_graph(g: &mut Graph, p: &Bound, spec: &EncoderSpec, x: Var) -> Result<Var> {
    let r = spec.resolution;
    expect_shape(g, x, &[1, r, r], "encoder input")?;
    let n = g.shape(x)[0];
    let h = p.conv(g, "stem", x, 1)?;
    let mut h = g.leaky_relu(h, LRELU_SLOPE);
    for l in 0..spec.conv_blocks {
        h = p.conv(g, &format!("down{l}"), h, 2)?;
        h = g.leaky_relu(h, LRELU_SLOPE);
    }
    let flat: usize = g.shape(h)[1..].iter().product();
    let h = g.reshape(h, &[n, flat])?;
    p.dense(g, "out", h)
}

/// Classifier logits `[N, 1]` plus named feature maps for GradCAM.
pub struct ClassifierOutputs {
    pub logits: Var,
    pub features: BTreeMap<String, Var>,
}

pub fn classifier_graph(g: &mut Graph, p: &Bound, spec: &ClassifierSpec, x: Var) -> Result<ClassifierOutputs> {
    let r = spec.resolution;
    expect_shape(g, x, &[1, r, r], "classifier input")?;
    let mut features = BTreeMap::new();
    let h = p.conv(g, "stem", x, 2)?;
    let mut h = g.leaky_relu(h, LRELU_SLOPE);
    features.insert("stem".to_string(), h);
    for b in 1..=spec.conv_blocks {
        let stride = spec.block_stride(b);
        let y = p.conv(g, &format!("block{b}.conv1"), h, stride)?;
        let y = g.leaky_relu(y, LRELU_SLOPE);
        let y = p.conv(g, &format!("block{b}.conv2"), y, 1)?;
        let skip = if p.layers.contains_key(&format!("block{b}.skip")) {
            p.conv(g, &format!("block{b}.skip"), h, stride)?
        } else {
            h
        };
        let y = g.add(y, skip)?;
        h = g.leaky_relu(y, LRELU_SLOPE);
        features.insert(format!("block{b}"), h);
    }
    let pooled = g.global_avg_pool(h)?;
    let logits = p.dense(g, "head", pooled)?;
    Ok(ClassifierOutputs { logits, features })
}

// --- convenience forwards --------------------------------------------------

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn chunked<T>(
    inputs: &Tensor,
    mut f: impl FnMut(Tensor) -> Result<Tensor>,
    collect: impl Fn(&Tensor) -> Vec<T>,
) -> Result<Vec<T>> {
    let n = inputs.batch();
    let item_shape = inputs.shape()[1..].to_vec();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + INFER_CHUNK).min(n);
        let rows: Vec<&[f32]> = (start..end).map(|i| inputs.item(i)).collect();
        let y = f(Tensor::stack_rows(&rows, &item_shape)?)?;
        out.extend(collect(&y));
        start = end;
    }
    Ok(out)
}

pub fn mapping_forward_batch(params: &NetworkParams, spec: &GeneratorSpec, z: &Tensor) -> Result<Vec<LatentVector>> {
    let layers = spec.mapping_layers_table();
    chunked(
        z,
        |batch| {
            let mut g = Graph::new();
            let p = Bound::new(&mut g, params, &layers, false)?;
            let zv = g.leaf(batch, false);
            let w = mapping_graph(&mut g, &p, spec, zv)?;
            Ok(g.value(w).clone())
        },
        LatentVector::unbatch,
    )
}

/// `w = mapping(z)` for a single noise vector.
pub fn mapping_forward(params: &NetworkParams, spec: &GeneratorSpec, z: &[f32]) -> Result<LatentVector> {
    if z.len() != spec.noise_dim {
        return Err(LcxError::shape(format!(
            "noise vector has length {}, expected {}",
            z.len(),
            spec.noise_dim
        )));
    }
    let t = Tensor::new(vec![1, z.len()], z.to_vec())?;
    Ok(mapping_forward_batch(params, spec, &t)?.remove(0))
}

pub fn synthesis_forward_batch(
    params: &NetworkParams,
    spec: &GeneratorSpec,
    latents: &[LatentVector],
) -> Result<Vec<ImageTensor>> {
    if let Some(bad) = latents.iter().find(|w| w.dim() != spec.latent_dim) {
        return Err(LcxError::shape(format!(
            "latent has dimension {}, expected {}",
            bad.dim(),
            spec.latent_dim
        )));
    }
    if latents.is_empty() {
        return Ok(Vec::new());
    }
    let layers = spec.synthesis_layers_table();
    let mut out = Vec::with_capacity(latents.len());
    for chunk in latents.chunks(INFER_CHUNK) {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, params, &layers, false)?;
        let wv = g.leaf(LatentVector::batch(chunk)?, false);
        let x = synthesis_graph(&mut g, &p, spec, wv)?;
        out.extend(ImageTensor::unbatch(g.value(x))?);
    }
    Ok(out)
}

/// `G(w)`: a `resolution x resolution` image in `[-1, 1]`.
pub fn synthesis_forward(params: &NetworkParams, spec: &GeneratorSpec, w: &LatentVector) -> Result<ImageTensor> {
    Ok(synthesis_forward_batch(params, spec, std::slice::from_ref(w))?.remove(0))
}

fn check_images(images: &[ImageTensor], resolution: usize) -> Result<()> {
    if let Some(bad) = images.iter().find(|i| i.resolution() != resolution) {
        return Err(LcxError::shape(format!(
            "image is {0}x{0}, network expects {1}x{1}",
            bad.resolution(),
            resolution
        )));
    }
    Ok(())
}

fn image_net_batch(
    images: &[ImageTensor],
    resolution: usize,
    mut run: impl FnMut(&mut Graph, Var) -> Result<Var>,
) -> Result<Vec<Vec<f32>>> {
    check_images(images, resolution)?;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_CHUNK) {
        let mut g = Graph::new();
        let x = g.leaf(ImageTensor::batch(chunk)?, false);
        let y = run(&mut g, x)?;
        let t = g.value(y);
        out.extend((0..t.batch()).map(|i| t.item(i).to_vec()));
    }
    Ok(out)
}

pub fn encoder_forward_batch(params: &NetworkParams, spec: &EncoderSpec, images: &[ImageTensor]) -> Result<Vec<LatentVector>> {
    let layers = spec.layers_table();
    let rows = image_net_batch(images, spec.resolution, |g, x| {
        let p = Bound::new(g, params, &layers, false)?;
        encoder_graph(g, &p, spec, x)
    })?;
    Ok(rows.into_iter().map(LatentVector).collect())
}

/// `E(x)`: the latent estimate for one image.
pub fn encoder_forward(params: &NetworkParams, spec: &EncoderSpec, image: &ImageTensor) -> Result<LatentVector> {
    Ok(encoder_forward_batch(params, spec, std::slice::from_ref(image))?.remove(0))
}

pub fn classifier_logits(params: &NetworkParams, spec: &ClassifierSpec, images: &[ImageTensor]) -> Result<Vec<f64>> {
    let layers = spec.layers_table();
    let rows = image_net_batch(images, spec.resolution, |g, x| {
        let p = Bound::new(g, params, &layers, false)?;
        Ok(classifier_graph(g, &p, spec, x)?.logits)
    })?;
    Ok(rows.into_iter().map(|r| r[0] as f64).collect())
}

pub fn classifier_forward_batch(params: &NetworkParams, spec: &ClassifierSpec, images: &[ImageTensor]) -> Result<Vec<f64>> {
    Ok(classifier_logits(params, spec, images)?
        .into_iter()
        .map(sigmoid)
        .collect())
}

/// `f(x)`: the classifier's positive-class probability.
pub fn classifier_forward(params: &NetworkParams, spec: &ClassifierSpec, image: &ImageTensor) -> Result<f64> {
    Ok(classifier_forward_batch(params, spec, std::slice::from_ref(image))?[0])
}

pub fn discriminator_forward_batch(
    params: &NetworkParams,
    spec: &DiscriminatorSpec,
    images: &[ImageTensor],
) -> Result<Vec<f64>> {
    let layers = spec.layers_table();
    let rows = image_net_batch(images, spec.resolution, |g, x| {
        let p = Bound::new(g, params, &layers, false)?;
        discriminator_graph(g, &p, spec, x)
    })?;
    Ok(rows.into_iter().map(|r| r[0] as f64).collect())
}

pub fn discriminator_forward(params: &NetworkParams, spec: &DiscriminatorSpec, image: &ImageTensor) -> Result<f64> {
    Ok(discriminator_forward_batch(params, spec, std::slice::from_ref(image))?[0])
}

/// Gradient of the discriminator logit with respect to input pixels.
pub fn discriminator_input_grad(
    params: &NetworkParams,
    spec: &DiscriminatorSpec,
    image: &ImageTensor,
) -> Result<ImageTensor> {
    check_images(std::slice::from_ref(image), spec.resolution)?;
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params, &spec.layers_table(), false)?;
    let x = g.leaf(ImageTensor::batch(std::slice::from_ref(image))?, true);
    let y = discriminator_graph(&mut g, &p, spec, x)?;
    let grads = g.backward(y, Tensor::full(&[1, 1], 1.0))?;
    let gx = grads.get(x).expect("input requires grad");
    ImageTensor::new(spec.resolution, gx.data().to_vec())
}
