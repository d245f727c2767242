use serde::{Deserialize, Serialize};

use super::{BBox, BinaryMask, CanvasError, GridSpec, Image, Result, Rgb};
use crate::episode::SupportExample;

/// How boxes and masks are painted onto visual prompts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverlayStyle {
    pub box_color: Rgb,
    pub box_thickness: u32,
    pub mask_tint: Rgb,
    pub mask_alpha: f64,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        Self {
            box_color: Rgb::RED,
            box_thickness: 3,
            mask_tint: Rgb::LIGHT_BLUE,
            mask_alpha: 0.5,
        }
    }
}

impl OverlayStyle {
    pub fn validate(&self) -> Result<()> {
        if self.box_thickness < 1 {
            return Err(CanvasError::InvalidStyle("box_thickness must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_alpha) {
            return Err(CanvasError::InvalidStyle(format!("mask_alpha {} not in [0,1]", self.mask_alpha)));
        }
        Ok(())
    }
}

/// Paints a frame `box_thickness` pixels wide just inside the box perimeter.
pub fn draw_bbox(img: &Image, b: BBox, style: &OverlayStyle) -> Result<Image> {
    style.validate()?;
    b.validate(img.width(), img.height())?;
    let mut out = img.clone();
    let t = style.box_thickness;
    for y in b.y_min..b.y_max {
        for x in b.x_min..b.x_max {
            let on_frame = x < b.x_min + t || x + t >= b.x_max || y < b.y_min + t || y + t >= b.y_max;
            if on_frame {
                out.set(x, y, style.box_color);
            }
        }
    }
    Ok(out)
}

#[inline]
fn blend_channel(src: u8, tint: u8, alpha: f64) -> u8 {
    // round half up
    let v = (1.0 - alpha) * src as f64 + alpha * tint as f64;
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Alpha-blends `mask_tint` over every true-mask pixel.
pub fn draw_mask_overlay(img: &Image, mask: &BinaryMask, style: &OverlayStyle) -> Result<Image> {
    style.validate()?;
    if img.dims() != mask.dims() {
        return Err(CanvasError::DimensionMismatch(img.width(), img.height(), mask.width(), mask.height()));
    }
    let mut out = img.clone();
    let a = style.mask_alpha;
    let t = style.mask_tint;
    for y in 0..img.height() {
        for x in 0..img.width() {
            if mask.get(x, y) {
                let s = img.get(x, y);
                out.set(
                    x,
                    y,
                    Rgb(blend_channel(s.0, t.0, a), blend_channel(s.1, t.1, a), blend_channel(s.2, t.2, a)),
                );
            }
        }
    }
    Ok(out)
}

/// Support-image visual prompt: mask tint, then box frame, then (optionally) the grid.
pub fn compose_support_panel(example: &SupportExample, style: &OverlayStyle, grid: Option<&GridSpec>) -> Result<Image> {
    let tinted = draw_mask_overlay(&example.image, &example.mask, style)?;
    let boxed = draw_bbox(&tinted, example.bbox, style)?;
    Ok(match grid {
        Some(g) => super::draw_coordinate_grid(&boxed, g),
        None => boxed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::ClassId;
    use std::sync::Arc;

    fn white(w: u32, h: u32) -> Image {
        Image::new(w, h, Rgb::WHITE)
    }

    fn changed(a: &Image, b: &Image) -> Vec<(u32, u32)> {
        let mut v = vec![];
        for y in 0..a.height() {
            for x in 0..a.width() {
                if a.get(x, y) != b.get(x, y) {
                    v.push((x, y));
                }
            }
        }
        v
    }

    #[test]
    fn bbox_thickness_one_perimeter() {
        let img = white(10, 10);
        let style = OverlayStyle { box_thickness: 1, ..Default::default() };
        let out = draw_bbox(&img, BBox::new(2, 2, 6, 6), &style).unwrap();
        // enumerate the perimeter of the 4x4 region independently
        let mut expected = vec![];
        for y in 2..6u32 {
            for x in 2..6u32 {
                if x == 2 || x == 5 || y == 2 || y == 5 {
                    expected.push((x, y));
                }
            }
        }
        assert_eq!(expected.len(), 12);
        assert_eq!(changed(&img, &out), expected);
        for (x, y) in expected {
            assert_eq!(out.get(x, y), Rgb::RED);
        }
        // input untouched
        assert_eq!(img, white(10, 10));
    }

    #[test]
    fn bbox_full_image_ring() {
        let img = white(8, 6);
        let style = OverlayStyle { box_thickness: 1, ..Default::default() };
        let out = draw_bbox(&img, BBox::full(8, 6), &style).unwrap();
        let ring = changed(&img, &out);
        assert_eq!(ring.len(), 2 * 8 + 2 * 4);
        assert!(ring.iter().all(|&(x, y)| x == 0 || y == 0 || x == 7 || y == 5));
    }

    #[test]
    fn bbox_zero_width_rejected() {
        let img = white(10, 10);
        let err = draw_bbox(&img, BBox::new(5, 5, 5, 9), &OverlayStyle::default()).unwrap_err();
        assert!(matches!(err, CanvasError::BoxOutOfBounds(..)));
        let err = draw_bbox(&img, BBox::new(5, 5, 11, 9), &OverlayStyle::default()).unwrap_err();
        assert!(matches!(err, CanvasError::BoxOutOfBounds(..)));
    }

    #[test]
    fn overlay_alpha_cases() {
        let img = Image::new(3, 3, Rgb::BLACK);
        let mask = BinaryMask::from_fn(3, 3, |x, _| x == 1);
        let s0 = OverlayStyle { mask_alpha: 0.0, ..Default::default() };
        assert_eq!(draw_mask_overlay(&img, &mask, &s0).unwrap(), img);

        let s1 = OverlayStyle { mask_alpha: 1.0, ..Default::default() };
        let out = draw_mask_overlay(&Image::new(3, 3, Rgb(7, 8, 9)), &mask, &s1).unwrap();
        assert_eq!(out.get(1, 0), Rgb(102, 204, 255));
        assert_eq!(out.get(0, 0), Rgb(7, 8, 9));

        let half = OverlayStyle { mask_alpha: 0.5, ..Default::default() };
        let out = draw_mask_overlay(&img, &mask, &half).unwrap();
        // 0.5*102 = 51, 0.5*204 = 102, 0.5*255 = 127.5 -> 128
        assert_eq!(out.get(1, 2), Rgb(51, 102, 128));
        assert_eq!(changed(&img, &out).len(), 3);
    }

    #[test]
    fn overlay_dimension_mismatch() {
        let img = white(4, 4);
        let mask = BinaryMask::empty(4, 5);
        assert!(matches!(
            draw_mask_overlay(&img, &mask, &OverlayStyle::default()),
            Err(CanvasError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn blend_stays_between_endpoints() {
        for src in (0..=255u16).step_by(17) {
            for tint in (0..=255u16).step_by(15) {
                for k in 0..=10 {
                    let a = k as f64 / 10.0;
                    let v = blend_channel(src as u8, tint as u8, a) as u16;
                    assert!(v >= src.min(tint) && v <= src.max(tint));
                }
            }
        }
    }

    fn example(img: &Image, b: BBox) -> SupportExample {
        let mask = BinaryMask::from_box(img.width(), img.height(), BBox::new(b.x_min + 1, b.y_min + 1, b.x_max - 1, b.y_max - 1));
        SupportExample { image_id: "s".into(), class_id: ClassId(1), mask, bbox: b, image: Arc::new(img.clone()) }
    }

    #[test]
    fn support_panel_identity_style_changes_only_perimeter() {
        let img = white(12, 12);
        let b = BBox::new(2, 3, 9, 10);
        let ex = example(&img, b);
        let style = OverlayStyle { mask_alpha: 0.0, box_thickness: 1, ..Default::default() };
        let out = compose_support_panel(&ex, &style, None).unwrap();
        let diff = changed(&img, &out);
        assert!(!diff.is_empty());
        for (x, y) in diff {
            assert!(x == b.x_min || x == b.x_max - 1 || y == b.y_min || y == b.y_max - 1);
        }
    }

    #[test]
    fn support_panel_frame_wins_over_tint() {
        let img = white(12, 12);
        let b = BBox::new(2, 2, 10, 10);
        // mask covers the whole box including the frame pixels
        let ex = SupportExample {
            image_id: "s".into(),
            class_id: ClassId(1),
            mask: BinaryMask::from_box(12, 12, b),
            bbox: b,
            image: Arc::new(img.clone()),
        };
        let style = OverlayStyle { box_thickness: 2, ..Default::default() };
        let out = compose_support_panel(&ex, &style, None).unwrap();
        for y in 2..10 {
            for x in 2..10 {
                let frame = x < 4 || x >= 8 || y < 4 || y >= 8;
                if frame {
                    assert_eq!(out.get(x, y), Rgb::RED);
                } else {
                    assert_ne!(out.get(x, y), Rgb::RED);
                }
            }
        }
    }
}
