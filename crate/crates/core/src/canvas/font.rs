//! Embedded 5x7 bitmap digits for tick labels.

use super::{Image, Rgb};

pub const GLYPH_W: u32 = 5;
pub const GLYPH_H: u32 = 7;

// One byte per row, low 5 bits, MSB of those is the leftmost column.
const DIGITS: [[u8; 7]; 10] = [
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E], // 0
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E], // 1
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F], // 2
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E], // 3
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02], // 4
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E], // 5
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E], // 6
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08], // 7
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E], // 8
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C], // 9
];

fn glyph_on(digit: u8, col: u32, row: u32) -> bool {
    DIGITS[digit as usize][row as usize] & (1 << (GLYPH_W - 1 - col)) != 0
}

/// Width in pixels of `text` at integer `scale`, one scaled column of spacing between glyphs.
pub fn text_width(text: &str, scale: u32) -> u32 {
    let n = text.chars().filter(|c| c.is_ascii_digit()).count() as u32;
    if n == 0 {
        0
    } else {
        n * GLYPH_W * scale + (n - 1) * scale
    }
}

/// Draws decimal digits with the top-left corner at `(x, y)`, clipped to the image.
/// Non-digit characters are skipped.
pub fn draw_digits(img: &mut Image, x: i64, y: i64, text: &str, scale: u32, color: Rgb) {
    let scale = scale.max(1) as i64;
    let mut cx = x;
    for ch in text.chars() {
        let Some(d) = ch.to_digit(10) else { continue };
        for row in 0..GLYPH_H {
            for col in 0..GLYPH_W {
                if glyph_on(d as u8, col, row) {
                    for sy in 0..scale {
                        for sx in 0..scale {
                            img.put(cx + col as i64 * scale + sx, y + row as i64 * scale + sy, color);
                        }
                    }
                }
            }
        }
        cx += (GLYPH_W as i64 + 1) * scale;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_distinct_and_nonempty() {
        for (i, a) in DIGITS.iter().enumerate() {
            assert!(a.iter().any(|r| *r != 0));
            assert!(a.iter().all(|r| *r < 32));
            for b in DIGITS.iter().skip(i + 1) {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn one_draws_expected_pixels() {
        let mut img = Image::new(6, 8, Rgb::WHITE);
        draw_digits(&mut img, 0, 0, "1", 1, Rgb::BLACK);
        // "1" has a 3-wide base on the last row
        assert_eq!(img.get(1, 6), Rgb::BLACK);
        assert_eq!(img.get(3, 6), Rgb::BLACK);
        assert_eq!(img.get(0, 6), Rgb::WHITE);
        assert_eq!(text_width("100", 2), 3 * 10 + 2 * 2);
    }
}
