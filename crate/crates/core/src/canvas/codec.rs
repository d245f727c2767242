//! PNG and run-length codecs for images and masks.
//!
//! RLE layout: little-endian `u32 width`, `u32 height`, then `u32` run lengths
//! over the row-major bits, alternating and starting with a run of `false`
//! (which may be zero).

use std::io::Cursor;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{BinaryMask, CanvasError, Image, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskFormat {
    Png1bit,
    Rle,
}

fn malformed(msg: impl Into<String>) -> CanvasError {
    CanvasError::MalformedEncoding(msg.into())
}

pub fn encode_mask(mask: &BinaryMask, format: MaskFormat) -> Vec<u8> {
    match format {
        MaskFormat::Rle => encode_rle(mask),
        MaskFormat::Png1bit => encode_png_1bit(mask),
    }
}

pub fn decode_mask(bytes: &[u8], format: MaskFormat) -> Result<BinaryMask> {
    match format {
        MaskFormat::Rle => decode_rle(bytes),
        MaskFormat::Png1bit => decode_png_mask(bytes),
    }
}

pub fn encode_mask_rle_base64(mask: &BinaryMask) -> String {
    base64::engine::general_purpose::STANDARD.encode(encode_rle(mask))
}

pub fn decode_mask_rle_base64(s: &str) -> Result<BinaryMask> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s.trim())
        .map_err(|e| malformed(format!("base64: {e}")))?;
    decode_rle(&bytes)
}

fn encode_rle(mask: &BinaryMask) -> Vec<u8> {
    let mut out = Vec::with_capacity(16);
    out.extend_from_slice(&mask.width().to_le_bytes());
    out.extend_from_slice(&mask.height().to_le_bytes());
    let mut current = false;
    let mut run: u32 = 0;
    for &b in mask.bits() {
        if b != current {
            out.extend_from_slice(&run.to_le_bytes());
            current = b;
            run = 0;
        }
        run += 1;
    }
    out.extend_from_slice(&run.to_le_bytes());
    out
}

fn decode_rle(bytes: &[u8]) -> Result<BinaryMask> {
    if bytes.len() < 8 {
        return Err(malformed("rle header truncated"));
    }
    if bytes.len() % 4 != 0 {
        return Err(malformed("rle stream not a whole number of u32 words"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let (w, h) = (word(0), word(1));
    if w == 0 || h == 0 {
        return Err(malformed(format!("zero mask dimension {w}x{h}")));
    }
    let total = w as u64 * h as u64;
    let mut bits = Vec::with_capacity(total as usize);
    let mut value = false;
    let mut filled: u64 = 0;
    for i in 2..bytes.len() / 4 {
        let run = word(i) as u64;
        filled += run;
        if filled > total {
            return Err(malformed(format!("runs exceed {total} pixels")));
        }
        bits.extend(std::iter::repeat_n(value, run as usize));
        value = !value;
    }
    if filled != total {
        return Err(malformed(format!("runs cover {filled} of {total} pixels")));
    }
    BinaryMask::from_bits(w, h, bits)
}

fn encode_png_1bit(mask: &BinaryMask) -> Vec<u8> {
    let (w, h) = mask.dims();
    let stride = (w as usize).div_ceil(8);
    let mut data = vec![0u8; stride * h as usize];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                data[y as usize * stride + x as usize / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w, h);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc.write_header().expect("png header to memory");
        writer.write_image_data(&data).expect("png data to memory");
    }
    out
}

/// Decodes any grayscale/RGB PNG as a mask; nonzero luma is foreground.
fn decode_png_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| malformed(format!("png: {e}")))?
        .into_luma8();
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(malformed("empty png"));
    }
    BinaryMask::from_bits(w, h, img.as_raw().iter().map(|&v| v != 0).collect())
}

/// 8-bit RGB PNG.
pub fn encode_image_png(img: &Image) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width(), img.height());
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("png header to memory");
        writer.write_image_data(img.as_raw()).expect("png data to memory");
    }
    out
}

/// Decodes PNG or JPEG bytes into RGB.
pub fn decode_image_png(bytes: &[u8]) -> Result<Image> {
    let img = image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| malformed(format!("image: {e}")))?
        .decode()
        .map_err(|e| malformed(format!("image: {e}")))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Image::from_raw(w, h, img.into_raw())
}
