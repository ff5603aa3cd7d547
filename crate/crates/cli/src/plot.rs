//! Hand-drawn training curves: total loss on the left panel, validation
//! mIoU on the right, one colored polyline per run.

use dfcps::train::EpochMetrics;
use image::{Rgb, RgbImage};

const PALETTE: [(&str, [u8; 3]); 8] = [
    ("blue", [31, 119, 180]),
    ("orange", [255, 127, 14]),
    ("green", [44, 160, 44]),
    ("red", [214, 39, 40]),
    ("purple", [148, 103, 189]),
    ("brown", [140, 86, 75]),
    ("pink", [227, 119, 194]),
    ("gray", [127, 127, 127]),
];

const PANEL_W: u32 = 480;
const PANEL_H: u32 = 320;
const MARGIN: u32 = 24;

pub fn color_name(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()].0
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn frame(img: &mut RgbImage, left: u32) {
    let black = Rgb([0, 0, 0]);
    let (l, r) = (i64::from(left + MARGIN), i64::from(left + PANEL_W - MARGIN));
    let (t, b) = (i64::from(MARGIN), i64::from(PANEL_H - MARGIN));
    for (a, z) in [
        ((l, t), (r, t)),
        ((r, t), (r, b)),
        ((r, b), (l, b)),
        ((l, b), (l, t)),
    ] {
        line(img, a, z, black);
    }
}

fn panel(img: &mut RgbImage, left: u32, series: &[Vec<f64>]) {
    frame(img, left);
    let values = series.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !lo.is_finite() {
        return;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let longest = series.iter().map(Vec::len).max().unwrap_or(0).max(2);
    let inner_w = f64::from(PANEL_W - 2 * MARGIN - 8);
    let inner_h = f64::from(PANEL_H - 2 * MARGIN - 8);
    for (i, s) in series.iter().enumerate() {
        let c = Rgb(PALETTE[i % PALETTE.len()].1);
        let pts: Vec<(i64, i64)> = s
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(e, v)| {
                let x = f64::from(left + MARGIN + 4) + inner_w * e as f64 / (longest - 1) as f64;
                let y = f64::from(PANEL_H - MARGIN - 4) - inner_h * (v - lo) / span;
                (x.round() as i64, y.round() as i64)
            })
            .collect();
        for w in pts.windows(2) {
            line(img, w[0], w[1], c);
        }
        if let [only] = pts.as_slice() {
            line(img, *only, *only, c);
        }
    }
}

/// Two side-by-side panels of per-epoch curves.
pub fn draw_curves(runs: &[&[EpochMetrics]]) -> RgbImage {
    let mut img = RgbImage::from_pixel(2 * PANEL_W, PANEL_H, Rgb([255, 255, 255]));
    let loss: Vec<Vec<f64>> = runs
        .iter()
        .map(|h| h.iter().map(|m| m.total).collect())
        .collect();
    let miou: Vec<Vec<f64>> = runs
        .iter()
        .map(|h| h.iter().map(|m| m.miou_val).collect())
        .collect();
    panel(&mut img, 0, &loss);
    panel(&mut img, PANEL_W, &miou);
    img
}
