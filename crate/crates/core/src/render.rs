//! Traversal strips: frames side by side with lambda, score and gap labels,
//! and an optional GradCAM panel in front.

use std::path::Path;

use crate::error::{LcxError, Result};
use crate::gradcam::{self, Heatmap};
use crate::imageio::{self, RgbCanvas};
use crate::latent::TraversalSeries;

/// Pixel magnification of frames in a strip.
pub const FRAME_SCALE: usize = 2;
pub const MARGIN: usize = 8;
const GLYPH_SCALE: usize = 2;
const LINE_HEIGHT: usize = 6 * GLYPH_SCALE;
const LABEL_LINES: usize = 3;
const BACKGROUND: [u8; 3] = [255, 255, 255];
const INK: [u8; 3] = [0, 0, 0];
const IDENTITY_MARK: [u8; 3] = [200, 30, 30];

/// 3x5 glyphs, rows top to bottom, three bits per row (MSB = left).
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '-' => [0, 0, 7, 0, 0],
        '+' => [0, 2, 7, 2, 0],
        '.' => [0, 0, 0, 0, 2],
        '=' => [0, 7, 0, 7, 0],
        'f' => [3, 2, 7, 2, 2],
        'g' => [7, 5, 7, 1, 6],
        'n' => [0, 6, 5, 5, 5],
        'a' => [0, 3, 5, 5, 3],
        'λ' => [4, 2, 2, 5, 5],
        _ => [0; 5],
    }
}

fn draw_text(canvas: &mut RgbCanvas, x0: usize, y0: usize, text: &str) {
    let advance = 4 * GLYPH_SCALE;
    for (i, c) in text.chars().enumerate() {
        let rows = glyph(c);
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..3 {
                if bits & (4 >> col) == 0 {
                    continue;
                }
                for dy in 0..GLYPH_SCALE {
                    for dx in 0..GLYPH_SCALE {
                        let x = x0 + i * advance + col * GLYPH_SCALE + dx;
                        let y = y0 + r * GLYPH_SCALE + dy;
                        if x < canvas.width && y < canvas.height {
                            canvas.set(x, y, INK);
                        }
                    }
                }
            }
        }
    }
}

/// Strip dimensions `(width, height)` for `panels` panels of side `frame`.
pub fn strip_size(panels: usize, frame: usize) -> (usize, usize) {
    (
        panels * frame + (panels + 1) * MARGIN,
        2 * MARGIN + frame + MARGIN / 2 + LABEL_LINES * LINE_HEIGHT,
    )
}

pub fn render_strip(series: &TraversalSeries, gradcam_overlay: Option<&Heatmap>) -> Result<RgbCanvas> {
    if series.frames.is_empty() {
        return Err(LcxError::Contract("cannot render an empty series".into()));
    }
    let res = series.frames[0].image.resolution();
    let fw = res * FRAME_SCALE;
    let panels = series.frames.len() + usize::from(gradcam_overlay.is_some());
    let (width, height) = strip_size(panels, fw);
    let mut canvas = RgbCanvas::new(width, height, BACKGROUND);
    let label_y = MARGIN + fw + MARGIN / 2;
    let mut x = MARGIN;
    if let Some(heatmap) = gradcam_overlay {
        let overlay = gradcam::overlay_canvas(&series.identity_frame().image, heatmap, FRAME_SCALE)?;
        for y in 0..fw {
            for dx in 0..fw {
                canvas.set(x + dx, MARGIN + y, overlay.get(dx, y));
            }
        }
        draw_text(&mut canvas, x, label_y, &format!("f={:.2}", series.identity_frame().image_score));
        x += fw + MARGIN;
    }
    for frame in &series.frames {
        for row in 0..res {
            for col in 0..res {
                let v = imageio::to_u8(frame.image.get(row, col));
                for dy in 0..FRAME_SCALE {
                    for dx in 0..FRAME_SCALE {
                        canvas.set(x + col * FRAME_SCALE + dx, MARGIN + row * FRAME_SCALE + dy, [v; 3]);
                    }
                }
            }
        }
        if frame.lambda == 0.0 {
            for dx in 0..fw {
                canvas.set(x + dx, MARGIN - 3, IDENTITY_MARK);
                canvas.set(x + dx, MARGIN - 2, IDENTITY_MARK);
            }
        }
        draw_text(&mut canvas, x, label_y, &format!("λ={:+.1}", frame.lambda));
        draw_text(&mut canvas, x, label_y + LINE_HEIGHT, &format!("f={:.2}", frame.image_score));
        let gap = match frame.gap_estimate.and_then(|g| g.value()) {
            Some(v) => format!("g={v:.2}"),
            None => "g=na".to_string(),
        };
        draw_text(&mut canvas, x, label_y + 2 * LINE_HEIGHT, &gap);
        x += fw + MARGIN;
    }
    Ok(canvas)
}

pub fn export_strip(series: &TraversalSeries, gradcam_overlay: Option<&Heatmap>, path: &Path) -> Result<()> {
    let bytes = render_strip(series, gradcam_overlay)?.encode_png()?;
    std::fs::write(path, bytes).map_err(|e| LcxError::io(path, e))
}
