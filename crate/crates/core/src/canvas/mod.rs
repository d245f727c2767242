//! Pixel primitives and the visual prompts rendered for the vision model.
//!
//! Coordinates are `(x right, y down)` with the origin at the top-left pixel.
//! Boxes are min-inclusive and max-exclusive.

mod codec;
mod draw;
mod font;
mod grid;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use codec::{
    decode_image_png, decode_mask, decode_mask_rle_base64, encode_image_png, encode_mask,
    encode_mask_rle_base64, MaskFormat,
};
pub use draw::{compose_support_panel, draw_bbox, draw_mask_overlay, OverlayStyle};
pub use grid::{draw_coordinate_grid, GridSpec};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CanvasError {
    #[error("box {0:?} out of bounds for {1}x{2} image")]
    BoxOutOfBounds(BBox, u32, u32),
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("mask is empty")]
    EmptyMask,
    #[error("malformed encoding: {0}")]
    MalformedEncoding(String),
    #[error("invalid style: {0}")]
    InvalidStyle(String),
}

pub type Result<T, E = CanvasError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rgb(pub u8, pub u8, pub u8);

impl Rgb {
    pub const RED: Rgb = Rgb(255, 0, 0);
    pub const LIGHT_BLUE: Rgb = Rgb(102, 204, 255);
    pub const WHITE: Rgb = Rgb(255, 255, 255);
    pub const BLACK: Rgb = Rgb(0, 0, 0);
}

/// Axis-aligned pixel box, serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl From<[u32; 4]> for BBox {
    fn from(v: [u32; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BBox {
    pub const fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> u32 {
        self.x_max.saturating_sub(self.x_min)
    }

    pub fn height(&self) -> u32 {
        self.y_max.saturating_sub(self.y_min)
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn is_valid_for(&self, width: u32, height: u32) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max && self.x_max <= width && self.y_max <= height
    }

    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        if self.is_valid_for(width, height) {
            Ok(())
        } else {
            Err(CanvasError::BoxOutOfBounds(*self, width, height))
        }
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn edges(&self) -> [i64; 4] {
        [self.x_min as i64, self.y_min as i64, self.x_max as i64, self.y_max as i64]
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self::new(0, 0, width, height)
    }
}

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: u32, height: u32, fill: Rgb) -> Self {
        assert!(width >= 1 && height >= 1, "image dimensions must be positive");
        let n = width as usize * height as usize;
        let mut pixels = Vec::with_capacity(n * 3);
        for _ in 0..n {
            pixels.extend_from_slice(&[fill.0, fill.1, fill.2]);
        }
        Self { width, height, pixels }
    }

    pub fn from_raw(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != 3 * width as usize * height as usize {
            return Err(CanvasError::MalformedEncoding(format!(
                "{} bytes for {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        3 * (y as usize * self.width as usize + x as usize)
    }

    pub fn get(&self, x: u32, y: u32) -> Rgb {
        let o = self.offset(x, y);
        Rgb(self.pixels[o], self.pixels[o + 1], self.pixels[o + 2])
    }

    pub fn set(&mut self, x: u32, y: u32, c: Rgb) {
        let o = self.offset(x, y);
        self.pixels[o] = c.0;
        self.pixels[o + 1] = c.1;
        self.pixels[o + 2] = c.2;
    }

    /// Sets a pixel if it lies inside the image; used by clipped drawing.
    pub fn put(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as u64) < self.width as u64 && (y as u64) < self.height as u64 {
            self.set(x as u32, y as u32, c);
        }
    }

    pub fn fill_rect(&mut self, b: BBox, c: Rgb) {
        for y in b.y_min..b.y_max.min(self.height) {
            for x in b.x_min..b.x_max.min(self.width) {
                self.set(x, y, c);
            }
        }
    }
}

/// Row-major boolean raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![false; width as usize * height as usize] }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(CanvasError::MalformedEncoding(format!(
                "{} bits for {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn from_box(width: u32, height: u32, b: BBox) -> Self {
        Self::from_fn(width, height, |x, y| b.contains(x, y))
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(CanvasError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_dims(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Ok(BinaryMask { width: self.width, height: self.height, bits })
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_dims(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        Ok(BinaryMask { width: self.width, height: self.height, bits })
    }

    /// Keeps only pixels inside `b`.
    pub fn clip_to_box(&self, b: BBox) -> BinaryMask {
        BinaryMask::from_fn(self.width, self.height, |x, y| b.contains(x, y) && self.get(x, y))
    }

    /// Morphological dilation (`radius > 0`) or erosion (`radius < 0`) with a
    /// square structuring element of half-width `|radius|`.
    pub fn morph(&self, radius: i32) -> BinaryMask {
        if radius == 0 {
            return self.clone();
        }
        let r = radius.unsigned_abs() as i64;
        let dilate = radius > 0;
        let (w, h) = (self.width as i64, self.height as i64);
        BinaryMask::from_fn(self.width, self.height, |x, y| {
            let (x, y) = (x as i64, y as i64);
            let mut any = false;
            let mut all = true;
            for yy in (y - r)..=(y + r) {
                for xx in (x - r)..=(x + r) {
                    // pixels outside the image count as background
                    let v = xx >= 0 && yy >= 0 && xx < w && yy < h && self.get(xx as u32, yy as u32);
                    any |= v;
                    all &= v;
                }
            }
            if dilate {
                any
            } else {
                all
            }
        })
    }
}

/// Minimal box containing every true pixel of `mask`.
pub fn tight_bbox(mask: &BinaryMask) -> Result<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
    let mut seen = false;
    for y in 0..mask.height {
        let row = &mask.bits[y as usize * mask.width as usize..(y as usize + 1) * mask.width as usize];
        for (x, &b) in row.iter().enumerate() {
            if b {
                let x = x as u32;
                seen = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if seen {
        Ok(BBox::new(x0, y0, x1, y1))
    } else {
        Err(CanvasError::EmptyMask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tight_bbox_single_pixel() {
        let mut m = BinaryMask::empty(10, 10);
        m.set(3, 4, true);
        assert_eq!(tight_bbox(&m).unwrap(), BBox::new(3, 4, 4, 5));
    }

    #[test]
    fn tight_bbox_block() {
        // rows 2..5, cols 1..8 (max-exclusive)
        let m = BinaryMask::from_fn(10, 10, |x, y| (1..8).contains(&x) && (2..5).contains(&y));
        assert_eq!(tight_bbox(&m).unwrap(), BBox::new(1, 2, 8, 5));
    }

    #[test]
    fn tight_bbox_full_and_empty() {
        let full = BinaryMask::from_fn(10, 10, |_, _| true);
        assert_eq!(tight_bbox(&full).unwrap(), BBox::new(0, 0, 10, 10));
        assert_eq!(tight_bbox(&BinaryMask::empty(4, 4)), Err(CanvasError::EmptyMask));
    }

    #[test]
    fn morph_dilate_erode() {
        let mut m = BinaryMask::empty(7, 7);
        m.set(3, 3, true);
        let d = m.morph(1);
        assert_eq!(d.count(), 9);
        assert_eq!(d.morph(-1), m);
    }

    proptest! {
        #[test]
        fn tight_bbox_touches_all_edges(bits in proptest::collection::vec(any::<bool>(), 1..=144), w in 1u32..=12) {
            let h = (bits.len() as u32).div_ceil(w);
            let mut all = bits.clone();
            all.resize((w * h) as usize, false);
            let m = BinaryMask::from_bits(w, h, all).unwrap();
            prop_assume!(!m.is_empty());
            let b = tight_bbox(&m).unwrap();
            for y in 0..h {
                for x in 0..w {
                    if m.get(x, y) {
                        prop_assert!(b.contains(x, y));
                    }
                }
            }
            prop_assert!((b.y_min..b.y_max).any(|y| m.get(b.x_min, y)));
            prop_assert!((b.y_min..b.y_max).any(|y| m.get(b.x_max - 1, y)));
            prop_assert!((b.x_min..b.x_max).any(|x| m.get(x, b.y_min)));
            prop_assert!((b.x_min..b.x_max).any(|x| m.get(x, b.y_max - 1)));
        }
    }
}
