//! PNG encoding and decoding for single-channel images and RGB canvases.

use crate::error::{LcxError, Result};
use crate::tensor::ImageTensor;

/// `[-1, 1]` pixel to 8-bit gray: `round((p + 1) * 127.5)`.
pub fn to_u8(p: f32) -> u8 {
    ((p.clamp(-1.0, 1.0) as f64 + 1.0) * 127.5).round() as u8
}

pub fn from_u8(v: u8) -> f32 {
    (v as f64 / 127.5 - 1.0) as f32
}

fn encode(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| LcxError::Image(e.to_string()))?;
        writer
            .write_image_data(data)
            .map_err(|e| LcxError::Image(e.to_string()))?;
    }
    Ok(out)
}

pub fn encode_gray_png(image: &ImageTensor) -> Result<Vec<u8>> {
    let n = image.resolution();
    let bytes: Vec<u8> = image.pixels().iter().map(|&p| to_u8(p)).collect();
    encode(n, n, png::ColorType::Grayscale, &bytes)
}

/// An 8-bit RGB raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbCanvas {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbCanvas {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&fill);
        }
        RgbCanvas { width, height, data }
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = (y * self.width + x) * 3;
            self.data[i..i + 3].copy_from_slice(&rgb);
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode(self.width, self.height, png::ColorType::Rgb, &self.data)
    }
}

/// Decodes an 8-bit grayscale (or RGB/RGBA, converted by luma) square PNG.
pub fn decode_gray_png(bytes: &[u8]) -> Result<ImageTensor> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| LcxError::Image(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| LcxError::Image("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| LcxError::Image(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    if w != h {
        return Err(LcxError::Image(format!("expected a square image, got {w}x{h}")));
    }
    let channels = info.color_type.samples();
    let pixels: Vec<f32> = buf[..info.buffer_size()]
        .chunks(channels)
        .map(|px| match channels {
            1 | 2 => from_u8(px[0]),
            _ => {
                let luma = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
                from_u8(luma.round() as u8)
            }
        })
        .collect();
    ImageTensor::new(w, pixels)
}
