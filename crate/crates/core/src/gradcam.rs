//! Gradient-weighted class activation maps over the classifier.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{LcxError, Result};
use crate::graph::Graph;
use crate::imageio::{self, RgbCanvas};
use crate::nets::{classifier_graph, Bound, ClassifierSpec, NetworkParams};
use crate::tensor::{ImageTensor, Tensor};

const COLORMAP_FIXTURE: &str = include_str!("../fixtures/colormap_jet.txt");
/// Heatmap opacity in overlays.
pub const OVERLAY_ALPHA: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub resolution: usize,
    pub values: Vec<f32>,
    pub layer_name: String,
    pub target: u8,
}

impl Heatmap {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.resolution + col]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Share of total heatmap mass falling in rows `start..end`.
    pub fn row_band_mass(&self, start: usize, end: usize) -> f64 {
        let total: f64 = self.values.iter().map(|&v| v as f64).sum();
        if total == 0.0 {
            return 0.0;
        }
        let r = self.resolution;
        let band: f64 = self.values[start.min(r) * r..end.min(r) * r].iter().map(|&v| v as f64).sum();
        band / total
    }
}

/// The 256-entry RGB table used for overlays.
pub fn colormap() -> &'static [[u8; 3]; 256] {
    static TABLE: OnceLock<[[u8; 3]; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [[0u8; 3]; 256];
        let rows = COLORMAP_FIXTURE
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let mut count = 0;
        for (entry, line) in table.iter_mut().zip(rows) {
            let v: Vec<u8> = line.split_whitespace().map(|t| t.parse().expect("colormap entry")).collect();
            *entry = [v[0], v[1], v[2]];
            count += 1;
        }
        assert_eq!(count, 256, "colormap fixture must have 256 rows");
        table
    })
}

/// Bilinear resize of a `h x h` feature map to `r x r`.
///
/// Every downsampling conv in the classifier centers output cell `j` on
/// input pixel `2j`, so cell `j` of a map with total stride `S` sits over
/// input pixel `S * j`. Sampling there keeps the heatmap registered with
/// the image; the usual half-pixel mapping would shift it by `S / 2 - 0.5`.
fn upsample_bilinear(src: &[f32], h: usize, r: usize) -> Vec<f32> {
    let scale = h as f32 / r as f32;
    let coord = |i: usize| {
        let s = i as f32 * scale;
        let i0 = (s.floor() as usize).min(h - 1);
        let i1 = (i0 + 1).min(h - 1);
        (i0, i1, s - i0 as f32)
    };
    let mut out = vec![0.0; r * r];
    for y in 0..r {
        let (y0, y1, fy) = coord(y);
        for x in 0..r {
            let (x0, x1, fx) = coord(x);
            let top = src[y0 * h + x0] * (1.0 - fx) + src[y0 * h + x1] * fx;
            let bot = src[y1 * h + x0] * (1.0 - fx) + src[y1 * h + x1] * fx;
            out[y * r + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// GradCAM for the predicted class at feature map `layer_name`.
pub fn gradcam(classifier: &NetworkParams, spec: &ClassifierSpec, image: &ImageTensor, layer_name: &str) -> Result<Heatmap> {
    if !spec.feature_layers().iter().any(|l| l == layer_name) {
        return Err(LcxError::LayerLookup(layer_name.to_string()));
    }
    let r = spec.resolution;
    if image.resolution() != r {
        return Err(LcxError::shape(format!(
            "image is {0}x{0}, classifier expects {r}x{r}",
            image.resolution()
        )));
    }
    let mut g = Graph::new();
    let p = Bound::new(&mut g, classifier, &spec.layers_table(), false)?;
    // The input requires grad only so that feature maps carry gradients.
    let x = g.leaf(ImageTensor::batch(std::slice::from_ref(image))?, true);
    let out = classifier_graph(&mut g, &p, spec, x)?;
    let logit = g.value(out.logits).data()[0];
    let target = u8::from(logit > 0.0);
    let sign = if target == 1 { 1.0 } else { -1.0 };
    let fmap = out.features[layer_name];
    let grads = g.backward(out.logits, Tensor::full(&[1, 1], sign))?;
    let a = g.value(fmap);
    let (c, h, w) = (a.shape()[1], a.shape()[2], a.shape()[3]);
    let zeros = Tensor::zeros(a.shape());
    let da = grads.get(fmap).unwrap_or(&zeros);
    let plane = h * w;
    let mut cam = vec![0.0f32; plane];
    for ch in 0..c {
        let gch = &da.data()[ch * plane..(ch + 1) * plane];
        let weight = gch.iter().sum::<f32>() / plane as f32;
        if weight == 0.0 {
            continue;
        }
        for (acc, &v) in cam.iter_mut().zip(&a.data()[ch * plane..(ch + 1) * plane]) {
            *acc += weight * v;
        }
    }
    for v in &mut cam {
        *v = if *v > 0.0 { *v } else { 0.0 };
    }
    let mut values = upsample_bilinear(&cam, h, r);
    let max = values.iter().cloned().fold(0.0f32, f32::max);
    if max > 0.0 {
        for v in &mut values {
            *v = (*v / max).clamp(0.0, 1.0);
        }
    }
    Ok(Heatmap {
        resolution: r,
        values,
        layer_name: layer_name.to_string(),
        target,
    })
}

/// Heatmap alpha-blended over the grayscale image, nearest-scaled by `scale`.
pub fn overlay_canvas(image: &ImageTensor, heatmap: &Heatmap, scale: usize) -> Result<RgbCanvas> {
    if image.resolution() != heatmap.resolution {
        return Err(LcxError::shape("heatmap and image resolutions differ"));
    }
    let r = image.resolution();
    let cmap = colormap();
    let mut canvas = RgbCanvas::new(r * scale, r * scale, [0, 0, 0]);
    for row in 0..r {
        for col in 0..r {
            let gray = imageio::to_u8(image.get(row, col)) as f32;
            let idx = (heatmap.get(row, col) * 255.0).round() as usize;
            let c = cmap[idx.min(255)];
            let px = [0, 1, 2].map(|k| ((1.0 - OVERLAY_ALPHA) * gray + OVERLAY_ALPHA * c[k] as f32).round() as u8);
            for dy in 0..scale {
                for dx in 0..scale {
                    canvas.set(col * scale + dx, row * scale + dy, px);
                }
            }
        }
    }
    Ok(canvas)
}

pub fn overlay_png(image: &ImageTensor, heatmap: &Heatmap) -> Result<Vec<u8>> {
    overlay_canvas(image, heatmap, 1)?.encode_png()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_fixture_endpoints() {
        let c = colormap();
        assert_eq!(c[0], [0, 0, 128]);
        assert_eq!(c[255], [128, 0, 0]);
    }

    #[test]
    fn bilinear_of_constant_is_constant() {
        let up = upsample_bilinear(&[0.25; 16], 4, 16);
        assert!(up.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn bilinear_preserves_left_right_order() {
        let src = [0.0, 1.0, 0.0, 1.0];
        let up = upsample_bilinear(&src, 2, 8);
        for row in up.chunks(8) {
            assert!(row.windows(2).all(|p| p[0] <= p[1]));
            assert_eq!(row[0], 0.0);
            assert_eq!(row[7], 1.0);
        }
    }

    #[test]
    fn feature_cell_lands_on_its_receptive_center() {
        // stride 8: cell (2, 3) is centered on input pixel (16, 24)
        let mut src = vec![0.0; 64];
        src[2 * 8 + 3] = 1.0;
        let up = upsample_bilinear(&src, 8, 64);
        assert_eq!(up[16 * 64 + 24], 1.0);
        let peak = up.iter().cloned().fold(0.0f32, f32::max);
        assert_eq!(peak, 1.0);
        assert!(up[12 * 64 + 24] > 0.0 && up[20 * 64 + 24] > 0.0);
        assert_eq!(up[up.len() - 1], 0.0);
    }
}
