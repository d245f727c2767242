//! Deterministic synthetic dataset in the on-disk layout read by [`crate::episode::load_dataset`].
//!
//! Each class is a distinct filled shape with its own colour on a noisy
//! gradient background. Every image holds one or two objects in disjoint
//! halves of the frame, so per-class ground truth is never occluded.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::canvas::{encode_image_png, BBox, Image, Rgb};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthConfig {
    pub num_classes: u32,
    pub num_images: u32,
    pub width: u32,
    pub height: u32,
    /// Probability (percent) that an image gets a second object.
    pub second_object_pct: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { num_classes: 8, num_images: 48, width: 120, height: 90, second_object_pct: 40, seed: 2024 }
    }
}

pub const SHAPE_NAMES: [&str; 8] = ["disc", "square", "triangle", "ring", "cross", "diamond", "bar", "crescent"];

const COLORS: [Rgb; 8] = [
    Rgb(220, 40, 40),
    Rgb(40, 160, 60),
    Rgb(40, 70, 200),
    Rgb(230, 170, 20),
    Rgb(150, 50, 180),
    Rgb(20, 170, 170),
    Rgb(120, 80, 40),
    Rgb(230, 100, 170),
];

/// Whether pixel `(x, y)` belongs to a shape of kind `shape` inscribed in `b`.
fn inside(shape: usize, b: BBox, x: u32, y: u32) -> bool {
    if !b.contains(x, y) {
        return false;
    }
    let w = b.width() as f64;
    let h = b.height() as f64;
    // normalized coordinates in [-1, 1] measured at the pixel centre
    let u = 2.0 * (x as f64 + 0.5 - b.x_min as f64) / w - 1.0;
    let v = 2.0 * (y as f64 + 0.5 - b.y_min as f64) / h - 1.0;
    let r2 = u * u + v * v;
    match shape % 8 {
        0 => r2 <= 1.0,
        1 => u.abs() <= 0.85 && v.abs() <= 0.85,
        2 => v >= -1.0 && u.abs() <= (v + 1.0) / 2.0,
        3 => (0.3..=1.0).contains(&r2),
        4 => u.abs() <= 0.3 || v.abs() <= 0.3,
        5 => u.abs() + v.abs() <= 1.0,
        6 => v.abs() <= 0.4,
        _ => r2 <= 1.0 && (u - 0.5).powi(2) + v * v > 0.5,
    }
}

fn background(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Image {
    let base: [f64; 3] = [rng.random_range(60.0..200.0), rng.random_range(60.0..200.0), rng.random_range(60.0..200.0)];
    let grad: [f64; 3] = [rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0)];
    let mut img = Image::new(w, h, Rgb::BLACK);
    for y in 0..h {
        for x in 0..w {
            let t = (x + y) as f64 / (w + h) as f64;
            let px: Vec<u8> = (0..3)
                .map(|c| (base[c] + grad[c] * t + rng.random_range(-8.0..8.0)).clamp(0.0, 255.0) as u8)
                .collect();
            img.set(x, y, Rgb(px[0], px[1], px[2]));
        }
    }
    img
}

fn place(rng: &mut ChaCha8Rng, region: BBox) -> BBox {
    let rw = region.width();
    let rh = region.height();
    let w = rng.random_range(rw * 2 / 5..=rw * 9 / 10).max(6);
    let h = rng.random_range(rh * 2 / 5..=rh * 9 / 10).max(6);
    let x = region.x_min + rng.random_range(0..=rw - w);
    let y = region.y_min + rng.random_range(0..=rh - h);
    BBox::new(x, y, x + w, y + h)
}

fn encode_labels(w: u32, h: u32, labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w, h);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("png header to memory");
        writer.write_image_data(labels).expect("png data to memory");
    }
    out
}

/// Writes `manifest.json`, `images/` and `masks/` under `root`.
pub fn generate_dataset(root: &Path, cfg: &SynthConfig) -> std::io::Result<()> {
    assert!(cfg.num_classes >= 1 && cfg.num_classes <= 254);
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    std::fs::create_dir_all(&images_dir)?;
    std::fs::create_dir_all(&masks_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width, cfg.height);
    let halves = [BBox::new(1, 1, w / 2 - 1, h - 1), BBox::new(w / 2 + 1, 1, w - 1, h - 1)];
    let mut manifest_images = Vec::new();

    for i in 0..cfg.num_images {
        let mut img = background(&mut rng, w, h);
        let mut labels = vec![0u8; (w * h) as usize];
        let primary = i % cfg.num_classes + 1;
        let mut objects = vec![primary];
        if cfg.num_classes > 1 && rng.random_range(0..100) < cfg.second_object_pct {
            let mut other = rng.random_range(1..=cfg.num_classes);
            if other == primary {
                other = other % cfg.num_classes + 1;
            }
            objects.push(other);
        }
        let swap = rng.random_bool(0.5);
        let mut present = Vec::new();
        for (slot, &class) in objects.iter().enumerate() {
            let region = if objects.len() == 1 {
                BBox::new(1, 1, w - 1, h - 1)
            } else {
                halves[slot ^ usize::from(swap)]
            };
            let b = place(&mut rng, region);
            let shape = (class - 1) as usize;
            let color = COLORS[shape % COLORS.len()];
            let mut any = false;
            for y in b.y_min..b.y_max {
                for x in b.x_min..b.x_max {
                    if inside(shape, b, x, y) {
                        img.set(x, y, color);
                        labels[(y * w + x) as usize] = class as u8;
                        any = true;
                    }
                }
            }
            if any {
                present.push(class);
            }
        }
        present.sort_unstable();
        let id = format!("img{i:04}");
        std::fs::write(images_dir.join(format!("{id}.png")), encode_image_png(&img))?;
        std::fs::write(masks_dir.join(format!("{id}.png")), encode_labels(w, h, &labels))?;
        manifest_images.push(json!({ "id": id, "classes": present }));
    }

    let classes: Vec<_> = (1..=cfg.num_classes)
        .map(|c| {
            let name = SHAPE_NAMES.get((c - 1) as usize).map(|s| s.to_string()).unwrap_or(format!("shape{c}"));
            json!({ "id": c, "name": name })
        })
        .collect();
    let manifest = json!({ "classes": classes, "images": manifest_images });
    std::fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}
