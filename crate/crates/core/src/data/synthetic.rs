//! Polyp-like blob images for desk-scale experiments.
//!
//! Each image is a textured, unevenly lit reddish background with one to
//! three filled ellipses whose hue differs from the background (the
//! foreground class) and up to two darker background-hued blobs that are
//! not labeled. Masks are exact: a pixel is foreground iff its center lies
//! inside one of the labeled ellipses.

use std::f64::consts::PI;
use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{load_dataset, DatasetIndex, MaskTensor};
use crate::augment::hsv_to_rgb;
use crate::error::{Error, Result};
use crate::rng::substream;

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random(rng: &mut impl Rng, side: f64, min_axis: f64, max_axis: f64) -> Self {
        let angle = rng.random_range(0.0..PI);
        Self {
            cx: rng.random_range(0.2 * side..0.8 * side),
            cy: rng.random_range(0.2 * side..0.8 * side),
            a: rng.random_range(min_axis..max_axis),
            b: rng.random_range(min_axis..max_axis),
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    /// Squared normalized radius of `(x, y)`; `<= 1` is inside.
    fn radius2(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v
    }
}

struct Blob {
    shape: Ellipse,
    hsv: [f64; 3],
}

fn render(side: usize, rng: &mut impl Rng) -> (RgbImage, MaskTensor) {
    let s = side as f64;
    let bg = [
        rng.random_range(-0.04..0.05f64).rem_euclid(1.0),
        rng.random_range(0.35..0.6),
        rng.random_range(0.55..0.8),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let dir = rng.random_range(0.0..2.0 * PI);
            let freq = rng.random_range(1.0..4.0) * 2.0 * PI / s;
            (
                rng.random_range(0.02..0.06),
                freq * dir.cos(),
                freq * dir.sin(),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let light = (rng.random_range(0.0..s), rng.random_range(0.0..s));

    let n_polyps = rng.random_range(1..=3);
    let polyps: Vec<Blob> = (0..n_polyps)
        .map(|_| {
            let shape = Ellipse::random(rng, s, s / 10.0, s / 4.0);
            let shift =
                rng.random_range(0.06..0.14) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            Blob {
                shape,
                hsv: [
                    (bg[0] + shift).rem_euclid(1.0),
                    (bg[1] + rng.random_range(0.0..0.25)).min(1.0),
                    (bg[2] + rng.random_range(-0.1..0.15)).clamp(0.0, 1.0),
                ],
            }
        })
        .collect();
    let n_distractors = rng.random_range(0..=2);
    let distractors: Vec<Blob> = (0..n_distractors)
        .map(|_| Blob {
            shape: Ellipse::random(rng, s, s / 16.0, s / 8.0),
            hsv: [bg[0], bg[1], bg[2] * rng.random_range(0.55..0.75)],
        })
        .collect();

    let noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let mut img = RgbImage::new(side as u32, side as u32);
    let mut labels = vec![0u8; side * side];
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut hsv = bg;
            for d in &distractors {
                if d.shape.radius2(px, py) <= 1.0 {
                    hsv = d.hsv;
                }
            }
            for p in &polyps {
                let r2 = p.shape.radius2(px, py);
                if r2 <= 1.0 {
                    hsv = p.hsv;
                    hsv[2] = (hsv[2] * (1.0 + 0.15 * (1.0 - r2))).min(1.0);
                    labels[y * side + x] = 1;
                }
            }
            let texture: f64 = waves
                .iter()
                .map(|&(amp, fx, fy, phase)| amp * (fx * px + fy * py + phase).sin())
                .sum();
            let dist2 = ((px - light.0).powi(2) + (py - light.1).powi(2)) / (2.0 * s * s);
            hsv[2] = (hsv[2] + texture) * (1.0 - 0.35 * dist2);
            let rgb = hsv_to_rgb(hsv[0], hsv[1].clamp(0.0, 1.0), hsv[2].clamp(0.0, 1.0));
            let px_val = rgb.map(|c| {
                let v = (c + noise.sample(rng)).clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, Rgb(px_val));
        }
    }
    let mask = MaskTensor::new(side, side, labels).expect("binary labels");
    (img, mask)
}

/// Writes `count` image/mask pairs of `side x side` pixels under `out` and
/// indexes the result. Output is a pure function of the arguments.
pub fn generate_synthetic(
    count: usize,
    side: usize,
    seed: u64,
    out: impl AsRef<Path>,
) -> Result<DatasetIndex> {
    if count == 0 {
        return Err(Error::Usage(
            "synthetic dataset needs at least one image".into(),
        ));
    }
    if side < 32 {
        return Err(Error::Usage(format!(
            "synthetic images need side >= 32, got {side}"
        )));
    }
    let out = out.as_ref();
    let images = out.join("images");
    let masks = out.join("masks");
    for dir in [&images, &masks] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let width = count.to_string().len().max(4);
    for i in 0..count {
        let mut rng = substream(seed, "synthetic", &[i as u64]);
        let (img, mask): (RgbImage, MaskTensor) = render(side, &mut rng);
        let name = format!("synth_{i:0width$}.png");
        let gray: GrayImage = mask.encode();
        let image_path = images.join(&name);
        img.save(&image_path).map_err(|source| Error::Image {
            path: image_path.clone(),
            source,
        })?;
        let mask_path = masks.join(&name);
        gray.save(&mask_path).map_err(|source| Error::Image {
            path: mask_path.clone(),
            source,
        })?;
    }
    load_dataset(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_sample;

    #[test]
    fn single_image_has_partial_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let index = generate_synthetic(1, 32, 0, dir.path()).unwrap();
        assert_eq!(index.len(), 1);
        let s = load_sample(&index.entries[0], None).unwrap();
        let fg = s.mask.labels().iter().filter(|&&v| v == 1).count();
        assert!(fg > 0 && fg < 32 * 32, "foreground pixels {fg}");
    }

    #[test]
    fn coverage_is_partial_for_many_seeds() {
        for i in 0..200u64 {
            let mut rng = substream(i, "synthetic", &[0]);
            let (_, mask) = render(32, &mut rng);
            let f = mask.foreground_fraction();
            assert!(f > 0.0 && f < 1.0, "seed {i}: {f}");
        }
    }

    #[test]
    fn output_is_byte_identical_across_runs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ia = generate_synthetic(5, 40, 11, a.path()).unwrap();
        let ib = generate_synthetic(5, 40, 11, b.path()).unwrap();
        for (ea, eb) in ia.entries.iter().zip(&ib.entries) {
            assert_eq!(
                std::fs::read(&ea.image_path).unwrap(),
                std::fs::read(&eb.image_path).unwrap()
            );
            assert_eq!(
                std::fs::read(&ea.mask_path).unwrap(),
                std::fs::read(&eb.mask_path).unwrap()
            );
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic(0, 64, 0, dir.path()).is_err());
        assert!(generate_synthetic(1, 31, 0, dir.path()).is_err());
        let file = dir.path().join("file");
        std::fs::write(&file, b"x").unwrap();
        assert!(generate_synthetic(1, 32, 0, file.join("sub")).is_err());
    }
}
