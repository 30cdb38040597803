//! Dense row-major `f32` tensors and the single-channel image / latent value types.

use serde::{Deserialize, Serialize};

use crate::error::{LcxError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(LcxError::shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the leading (batch) axis.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per leading-axis entry.
    pub fn item_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn item(&self, n: usize) -> &[f32] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(LcxError::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Stacks equally sized rows into a `[rows.len(), item_shape..]` tensor.
    pub fn stack_rows(rows: &[&[f32]], item_shape: &[usize]) -> Result<Self> {
        let item: usize = item_shape.iter().product();
        let mut data = Vec::with_capacity(rows.len() * item);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != item {
                return Err(LcxError::shape(format!(
                    "row {i} has {} elements, expected {item}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(item_shape);
        Tensor::new(shape, data)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, c: f32) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A square single-channel image with pixels nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    resolution: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(resolution: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != resolution * resolution {
            return Err(LcxError::shape(format!(
                "{resolution}x{resolution} image needs {} pixels, got {}",
                resolution * resolution,
                pixels.len()
            )));
        }
        Ok(ImageTensor { resolution, pixels })
    }

    pub fn filled(resolution: usize, value: f32) -> Self {
        ImageTensor {
            resolution,
            pixels: vec![value; resolution * resolution],
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.resolution + col]
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|p| (-1.0..=1.0).contains(p))
    }

    /// Batches images into an NCHW tensor with one channel.
    pub fn batch(images: &[ImageTensor]) -> Result<Tensor> {
        let res = images.first().map(|i| i.resolution).unwrap_or(0);
        let rows: Vec<&[f32]> = images.iter().map(|i| i.pixels.as_slice()).collect();
        Tensor::stack_rows(&rows, &[1, res, res])
    }

    pub fn unbatch(t: &Tensor) -> Result<Vec<ImageTensor>> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != s[3] {
            return Err(LcxError::shape(format!("expected [N,1,R,R], got {s:?}")));
        }
        (0..s[0])
            .map(|n| ImageTensor::new(s[2], t.item(n).to_vec()))
            .collect()
    }
}

/// A point `w` in the generator's intermediate latent space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentVector(pub Vec<f32>);

impl LatentVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn batch(latents: &[LatentVector]) -> Result<Tensor> {
        let d = latents.first().map(|l| l.dim()).unwrap_or(0);
        let rows: Vec<&[f32]> = latents.iter().map(|l| l.0.as_slice()).collect();
        Tensor::stack_rows(&rows, &[d])
    }

    pub fn unbatch(t: &Tensor) -> Vec<LatentVector> {
        (0..t.batch()).map(|n| LatentVector(t.item(n).to_vec())).collect()
    }
}
