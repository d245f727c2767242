use serde::{Deserialize, Serialize};

use super::font::{draw_digits, text_width, GLYPH_H};
use super::{BBox, CanvasError, Image, Result, Rgb};

/// Length in pixels of an edge tick when the full grid is off.
pub const TICK_LENGTH: u32 = 8;
pub const MIN_TICK_INTERVAL: u32 = 8;

/// Coordinate annotation drawn on the query image so the model can read off pixel positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub tick_interval: u32,
    pub draw_full_grid: bool,
    pub label_ticks: bool,
    pub line_color: Rgb,
    /// Glyph height in pixels; rounded down to a multiple of the 7-pixel font.
    pub label_size: u32,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            tick_interval: 100,
            draw_full_grid: false,
            label_ticks: true,
            line_color: Rgb(255, 255, 0),
            label_size: 14,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tick_interval < MIN_TICK_INTERVAL {
            return Err(CanvasError::InvalidStyle(format!(
                "tick_interval {} below minimum {MIN_TICK_INTERVAL}",
                self.tick_interval
            )));
        }
        Ok(())
    }

    fn scale(&self) -> u32 {
        (self.label_size / GLYPH_H).max(1)
    }
}

/// Positions (including 0) of grid lines along an axis of length `len`.
pub fn tick_positions(len: u32, interval: u32) -> Vec<u32> {
    (0..len).step_by(interval.max(MIN_TICK_INTERVAL) as usize).collect()
}

fn draw_label(img: &mut Image, x: i64, y: i64, value: u32, spec: &GridSpec) {
    let text = value.to_string();
    let scale = spec.scale();
    let w = text_width(&text, scale) as i64;
    let h = (GLYPH_H * scale) as i64;
    // dark backing so labels stay legible on any background
    for yy in (y - 1)..(y + h + 1) {
        for xx in (x - 1)..(x + w + 1) {
            img.put(xx, yy, Rgb::BLACK);
        }
    }
    draw_digits(img, x, y, &text, scale, spec.line_color);
}

/// Draws axes, grid lines or edge ticks every `tick_interval` pixels, and optional labels.
pub fn draw_coordinate_grid(img: &Image, spec: &GridSpec) -> Image {
    let mut out = img.clone();
    let (w, h) = img.dims();
    let xs = tick_positions(w, spec.tick_interval);
    let ys = tick_positions(h, spec.tick_interval);
    let c = spec.line_color;

    for &x in &xs {
        let y_end = if spec.draw_full_grid || x == 0 { h } else { TICK_LENGTH.min(h) };
        out.fill_rect(BBox::new(x, 0, x + 1, y_end), c);
    }
    for &y in &ys {
        let x_end = if spec.draw_full_grid || y == 0 { w } else { TICK_LENGTH.min(w) };
        out.fill_rect(BBox::new(0, y, x_end, y + 1), c);
    }

    if spec.label_ticks {
        let pad = 3i64;
        let off = (TICK_LENGTH as i64).min(h as i64) + pad;
        draw_label(&mut out, pad, pad, 0, spec);
        for &x in xs.iter().skip(1) {
            draw_label(&mut out, x as i64 + pad, off, x, spec);
        }
        let off = (TICK_LENGTH as i64).min(w as i64) + pad;
        for &y in ys.iter().skip(1) {
            draw_label(&mut out, off, y as i64 + pad, y, spec);
        }
    }
    out
}
