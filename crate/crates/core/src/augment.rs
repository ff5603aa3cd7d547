//! Weak (geometric) and strong (photometric) augmentation.
//!
//! A weak view is the source image under a random rotation, translation and
//! horizontal flip. A strong view of the same image is derived from the weak
//! view with photometric operations only, so both share one geometry and a
//! per-pixel target computed on one view is valid on the other.

use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::MaskTensor;
use crate::error::{Error, Result};
use crate::pseudolabel::PseudoLabel;
use crate::tensor::Tensor;

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 32;

/// RGB image, channel-major `(3, H, W)`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Shape(format!(
                "images must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
            )));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "{} values for a 3x{height}x{width} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite pixel value".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; 3 * height * width])
    }

    pub fn from_rgb(img: &RgbImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0;
            }
        }
        Self::new(h, w, data)
    }

    pub fn to_rgb(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = self.pixel(y as usize, x as usize);
            Rgb(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[3, self.height, self.width], self.data.clone())
            .expect("consistent shape")
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = y * self.width + x;
        let n = self.plane();
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = y * self.width + x;
        let n = self.plane();
        self.data[i] = rgb[0];
        self.data[n + i] = rgb[1];
        self.data[2 * n + i] = rgb[2];
    }

    fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Shared geometry of one augmented pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeomTransform {
    pub rotation_deg: f64,
    /// Translation as a fraction of the width.
    pub translate_x: f64,
    /// Translation as a fraction of the height.
    pub translate_y: f64,
    pub hflip: bool,
}

impl GeomTransform {
    pub const IDENTITY: Self = Self {
        rotation_deg: 0.0,
        translate_x: 0.0,
        translate_y: 0.0,
        hflip: false,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    fn center(h: usize, w: usize) -> (f64, f64) {
        ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
    }

    /// Where source pixel `(x, y)` lands in the output.
    pub fn forward(&self, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
        let (cx, cy) = Self::center(h, w);
        let x = if self.hflip { w as f64 - 1.0 - x } else { x };
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        (
            c * dx - s * dy + cx + self.translate_x * w as f64,
            s * dx + c * dy + cy + self.translate_y * h as f64,
        )
    }

    /// Which source location output pixel `(x, y)` samples.
    pub fn inverse(&self, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
        let (cx, cy) = Self::center(h, w);
        let (dx, dy) = (
            x - cx - self.translate_x * w as f64,
            y - cy - self.translate_y * h as f64,
        );
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let sx = c * dx + s * dy + cx;
        let sy = -s * dx + c * dy + cy;
        (if self.hflip { w as f64 - 1.0 - sx } else { sx }, sy)
    }
}

/// Bounds for [`sample_geom`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentBounds {
    pub max_rotation_deg: f64,
    pub max_translate: f64,
    pub hflip_prob: f64,
}

impl Default for AugmentBounds {
    fn default() -> Self {
        Self {
            max_rotation_deg: 30.0,
            max_translate: 0.125,
            hflip_prob: 0.5,
        }
    }
}

impl AugmentBounds {
    pub const NONE: Self = Self {
        max_rotation_deg: 0.0,
        max_translate: 0.0,
        hflip_prob: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=180.0).contains(&self.max_rotation_deg)
            || !(0.0..1.0).contains(&self.max_translate)
            || !(0.0..=1.0).contains(&self.hflip_prob)
        {
            return Err(Error::Config(format!(
                "invalid augmentation bounds {self:?}"
            )));
        }
        Ok(())
    }
}

/// Uniform rotation and translation within `bounds`, flip with
/// `bounds.hflip_prob`. Always consumes four draws.
pub fn sample_geom(rng: &mut impl Rng, bounds: &AugmentBounds) -> GeomTransform {
    let mut symmetric = |m: f64| {
        let u: f64 = rng.random();
        let v = (2.0 * u - 1.0) * m;
        if v == 0.0 {
            0.0
        } else {
            v
        }
    };
    let rotation_deg = symmetric(bounds.max_rotation_deg);
    let translate_x = symmetric(bounds.max_translate);
    let translate_y = symmetric(bounds.max_translate);
    let u: f64 = rng.random();
    GeomTransform {
        rotation_deg,
        translate_x,
        translate_y,
        hflip: u < bounds.hflip_prob,
    }
}

/// Bilinear resampling with zero fill outside the canvas.
pub fn warp_image(image: &ImageTensor, g: &GeomTransform) -> ImageTensor {
    if g.is_identity() {
        return image.clone();
    }
    let (h, w) = (image.height, image.width);
    let n = h * w;
    let mut out = vec![0.0; 3 * n];
    let fetch = |c: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            image.data[c * n + y as usize * w + x as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = g.inverse(x as f64, y as f64, h, w);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for c in 0..3 {
                out[c * n + y * w + x] = (1.0 - fy)
                    * ((1.0 - fx) * fetch(c, y0, x0) + fx * fetch(c, y0, x0 + 1))
                    + fy * ((1.0 - fx) * fetch(c, y0 + 1, x0) + fx * fetch(c, y0 + 1, x0 + 1));
            }
        }
    }
    ImageTensor {
        height: h,
        width: w,
        data: out,
    }
}

fn nearest(sx: f64, sy: f64, h: usize, w: usize) -> Option<usize> {
    let (x, y) = (sx.round(), sy.round());
    (x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64).then(|| y as usize * w + x as usize)
}

/// Nearest-neighbor resampling with background fill outside the canvas.
pub fn warp_mask(mask: &MaskTensor, g: &GeomTransform) -> MaskTensor {
    if g.is_identity() {
        return mask.clone();
    }
    let (h, w) = (mask.height(), mask.width());
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = g.inverse(x as f64, y as f64, h, w);
            if let Some(i) = nearest(sx, sy, h, w) {
                labels[y * w + x] = mask.labels()[i];
            }
        }
    }
    MaskTensor::new(h, w, labels).expect("labels copied from a valid mask")
}

/// Applies one geometry to an image and, optionally, its mask.
pub fn apply_geom(
    image: &ImageTensor,
    mask: Option<&MaskTensor>,
    g: &GeomTransform,
) -> Result<(ImageTensor, Option<MaskTensor>)> {
    if let Some(m) = mask {
        if (m.height(), m.width()) != (image.height, image.width) {
            return Err(Error::Shape(format!(
                "mask {}x{} for image {}x{}",
                m.height(),
                m.width(),
                image.height,
                image.width
            )));
        }
    }
    Ok((warp_image(image, g), mask.map(|m| warp_mask(m, g))))
}

/// For each pixel of a view under `to`, the pixel of the view under `from`
/// showing the same source location, if both lie on their canvases.
pub fn correspondence(
    from: &GeomTransform,
    to: &GeomTransform,
    h: usize,
    w: usize,
) -> Vec<Option<u32>> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (ox, oy) = to.inverse(x as f64, y as f64, h, w);
            let on_source = nearest(ox, oy, h, w).is_some();
            let (fx, fy) = from.forward(ox, oy, h, w);
            out.push(if on_source {
                nearest(fx, fy, h, w).map(|i| i as u32)
            } else {
                None
            });
        }
    }
    out
}

/// Moves a pseudo-label onto another view; unmatched pixels are dropped.
pub fn transport_label(label: &PseudoLabel, map: &[Option<u32>]) -> PseudoLabel {
    let mut labels = vec![0u8; map.len()];
    let mut keep = vec![false; map.len()];
    for (q, src) in map.iter().enumerate() {
        if let Some(i) = src {
            labels[q] = label.labels[*i as usize];
            keep[q] = label.keep[*i as usize];
        }
    }
    PseudoLabel {
        height: label.height,
        width: label.width,
        labels,
        keep,
        tau: label.tau,
    }
}

pub(crate) fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn luma([r, g, b]: [f64; 3]) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Magnitudes and toggles of the strong photometric menu. A zero magnitude
/// removes the operation from the menu.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotometricConfig {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub blur_sigma: f64,
    pub grayscale_prob: f64,
    pub min_ops: usize,
    pub max_ops: usize,
    /// Side of the CutOut square as a fraction of the shorter image side;
    /// zero disables CutOut.
    pub cutout: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            blur_sigma: 1.5,
            grayscale_prob: 0.2,
            min_ops: 1,
            max_ops: 3,
            cutout: 0.0,
        }
    }
}

impl PhotometricConfig {
    pub const DISABLED: Self = Self {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
        blur_sigma: 0.0,
        grayscale_prob: 0.0,
        min_ops: 0,
        max_ops: 0,
        cutout: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = self.brightness >= 0.0
            && self.contrast >= 0.0
            && self.saturation >= 0.0
            && (0.0..=0.5).contains(&self.hue)
            && self.blur_sigma >= 0.0
            && (0.0..=1.0).contains(&self.grayscale_prob)
            && self.min_ops <= self.max_ops
            && (0.0..1.0).contains(&self.cutout);
        if !ok {
            return Err(Error::Config(format!(
                "invalid photometric settings {self:?}"
            )));
        }
        Ok(())
    }

    fn menu(&self) -> Vec<MenuItem> {
        let mut menu = Vec::new();
        if self.brightness > 0.0 {
            menu.push(MenuItem::Brightness);
        }
        if self.contrast > 0.0 {
            menu.push(MenuItem::Contrast);
        }
        if self.saturation > 0.0 {
            menu.push(MenuItem::Saturation);
        }
        if self.hue > 0.0 {
            menu.push(MenuItem::Hue);
        }
        if self.blur_sigma > 0.0 {
            menu.push(MenuItem::Blur);
        }
        if self.grayscale_prob > 0.0 {
            menu.push(MenuItem::Grayscale);
        }
        menu
    }
}

#[derive(Clone, Copy, Debug)]
enum MenuItem {
    Brightness,
    Contrast,
    Saturation,
    Hue,
    Blur,
    Grayscale,
}

/// One concrete photometric operation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PhotometricOp {
    /// `out = in * (1 + f)`.
    Brightness(f64),
    /// Scales the distance from the mean luma by `1 + f`.
    Contrast(f64),
    /// Scales the distance from each pixel's luma by `1 + f`.
    Saturation(f64),
    /// Rotates hue by `f` turns.
    Hue(f64),
    GaussianBlur(f64),
    Grayscale,
    /// Fills a square of side `size` with mid gray.
    CutOut {
        x0: usize,
        y0: usize,
        size: usize,
    },
}

impl PhotometricOp {
    /// Applies the operation in place without clamping.
    pub fn apply(&self, img: &mut ImageTensor) {
        let (h, w) = (img.height, img.width);
        match *self {
            PhotometricOp::Brightness(f) => img.data.iter_mut().for_each(|v| *v *= 1.0 + f),
            PhotometricOp::Contrast(f) => {
                let mean = (0..h)
                    .flat_map(|y| (0..w).map(move |x| (y, x)))
                    .map(|(y, x)| luma(img.pixel(y, x)))
                    .sum::<f64>()
                    / (h * w) as f64;
                img.data
                    .iter_mut()
                    .for_each(|v| *v = (*v - mean) * (1.0 + f) + mean);
            }
            PhotometricOp::Saturation(f) => {
                for y in 0..h {
                    for x in 0..w {
                        let p = img.pixel(y, x);
                        let l = luma(p);
                        img.set_pixel(y, x, p.map(|c| (c - l) * (1.0 + f) + l));
                    }
                }
            }
            PhotometricOp::Hue(f) => {
                for y in 0..h {
                    for x in 0..w {
                        let p = img.pixel(y, x).map(|c| c.clamp(0.0, 1.0));
                        let [hh, s, v] = rgb_to_hsv(p);
                        img.set_pixel(y, x, hsv_to_rgb(hh + f, s, v));
                    }
                }
            }
            PhotometricOp::GaussianBlur(sigma) => gaussian_blur(img, sigma),
            PhotometricOp::Grayscale => {
                for y in 0..h {
                    for x in 0..w {
                        let l = luma(img.pixel(y, x));
                        img.set_pixel(y, x, [l; 3]);
                    }
                }
            }
            PhotometricOp::CutOut { x0, y0, size } => {
                for y in y0..(y0 + size).min(h) {
                    for x in x0..(x0 + size).min(w) {
                        img.set_pixel(y, x, [0.5; 3]);
                    }
                }
            }
        }
    }
}

fn gaussian_blur(img: &mut ImageTensor, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let (h, w) = (img.height as isize, img.width as isize);
    let n = (h * w) as usize;
    let mut tmp = vec![0.0; n];
    for c in 0..3 {
        let plane = &mut img.data[c * n..(c + 1) * n];
        for y in 0..h {
            for x in 0..w {
                tmp[(y * w + x) as usize] = kernel
                    .iter()
                    .zip(-radius..=radius)
                    .map(|(k, d)| k * plane[(y * w + (x + d).clamp(0, w - 1)) as usize])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[(y * w + x) as usize] = kernel
                    .iter()
                    .zip(-radius..=radius)
                    .map(|(k, d)| k * tmp[((y + d).clamp(0, h - 1) * w + x) as usize])
                    .sum();
            }
        }
    }
}

/// Draws the operations for one strong view: between `min_ops` and
/// `max_ops` distinct menu entries in random order, then CutOut if enabled.
pub fn sample_photometric(
    rng: &mut impl Rng,
    cfg: &PhotometricConfig,
    h: usize,
    w: usize,
) -> Vec<PhotometricOp> {
    let mut menu = cfg.menu();
    let mut ops = Vec::new();
    if !menu.is_empty() && cfg.max_ops > 0 {
        let hi = cfg.max_ops.min(menu.len());
        let lo = cfg.min_ops.min(hi);
        let count = rng.random_range(lo..=hi);
        menu.shuffle(rng);
        for item in menu.into_iter().take(count) {
            let op = match item {
                MenuItem::Brightness => Some(PhotometricOp::Brightness(
                    rng.random_range(-cfg.brightness..=cfg.brightness),
                )),
                MenuItem::Contrast => Some(PhotometricOp::Contrast(
                    rng.random_range(-cfg.contrast..=cfg.contrast),
                )),
                MenuItem::Saturation => Some(PhotometricOp::Saturation(
                    rng.random_range(-cfg.saturation..=cfg.saturation),
                )),
                MenuItem::Hue => Some(PhotometricOp::Hue(rng.random_range(-cfg.hue..=cfg.hue))),
                MenuItem::Blur => Some(PhotometricOp::GaussianBlur(
                    rng.random_range(0.1f64.min(cfg.blur_sigma)..=cfg.blur_sigma),
                )),
                MenuItem::Grayscale => rng
                    .random_bool(cfg.grayscale_prob)
                    .then_some(PhotometricOp::Grayscale),
            };
            ops.extend(op);
        }
    }
    if cfg.cutout > 0.0 {
        let size = ((cfg.cutout * h.min(w) as f64).round() as usize).max(1);
        ops.push(PhotometricOp::CutOut {
            x0: rng.random_range(0..=w - size.min(w)),
            y0: rng.random_range(0..=h - size.min(h)),
            size,
        });
    }
    ops
}

/// Strong photometric view of `image`; geometry is never altered.
pub fn strong_photometric(
    image: &ImageTensor,
    rng: &mut impl Rng,
    cfg: &PhotometricConfig,
) -> ImageTensor {
    let ops = sample_photometric(rng, cfg, image.height, image.width);
    let mut out = image.clone();
    if ops.is_empty() {
        return out;
    }
    for op in &ops {
        op.apply(&mut out);
    }
    out.clamp_unit();
    out
}

/// Weak and strong views of one unlabeled image under a shared geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub weak_view: ImageTensor,
    pub strong_view: ImageTensor,
    pub geom: GeomTransform,
    pub source_id: String,
}

pub fn make_pair(
    image: &ImageTensor,
    source_id: &str,
    rng: &mut impl Rng,
    bounds: &AugmentBounds,
    photometric: &PhotometricConfig,
) -> AugmentedPair {
    let geom = sample_geom(rng, bounds);
    let weak_view = warp_image(image, &geom);
    let strong_view = strong_photometric(&weak_view, rng, photometric);
    AugmentedPair {
        weak_view,
        strong_view,
        geom,
        source_id: source_id.to_owned(),
    }
}

/// Which augmentation the target-producing and student views receive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AblationStrategy {
    /// Targets from a weak view, student sees a strong view of it.
    #[default]
    StrongWeak,
    /// Two independent weak views; targets are carried across by geometry.
    WeakWeak,
    /// Two strong views sharing one geometry; the first produces targets.
    StrongStrong,
    /// No augmentation of unlabeled images at all.
    Original,
}

/// Augmentation applied to one branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pipeline {
    None,
    Weak,
    Strong,
}

impl Pipeline {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pipeline::None => "none",
            Pipeline::Weak => "weak",
            Pipeline::Strong => "strong",
        }
    }
}

impl AblationStrategy {
    pub const ALL: [AblationStrategy; 4] = [
        AblationStrategy::StrongWeak,
        AblationStrategy::WeakWeak,
        AblationStrategy::StrongStrong,
        AblationStrategy::Original,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationStrategy::StrongWeak => "strong-weak",
            AblationStrategy::WeakWeak => "weak-weak",
            AblationStrategy::StrongStrong => "strong-strong",
            AblationStrategy::Original => "original",
        }
    }

    /// `(target branch, student branch)`.
    pub fn pipelines(&self) -> (Pipeline, Pipeline) {
        match self {
            AblationStrategy::StrongWeak => (Pipeline::Weak, Pipeline::Strong),
            AblationStrategy::WeakWeak => (Pipeline::Weak, Pipeline::Weak),
            AblationStrategy::StrongStrong => (Pipeline::Strong, Pipeline::Strong),
            AblationStrategy::Original => (Pipeline::None, Pipeline::None),
        }
    }
}

impl fmt::Display for AblationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationStrategy::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown strategy {s:?}; expected strong-weak, weak-weak, strong-strong or original"
                ))
            })
    }
}

/// The two views of one unlabeled image fed to both networks.
#[derive(Clone, Debug)]
pub struct UnlabeledViews {
    /// View whose predictions become pseudo-labels.
    pub target: ImageTensor,
    /// View trained against those pseudo-labels.
    pub student: ImageTensor,
    /// Pixel map from student to target view when their geometries differ.
    pub correspondence: Option<Vec<Option<u32>>>,
}

pub fn build_views(
    image: &ImageTensor,
    strategy: AblationStrategy,
    rng: &mut impl Rng,
    bounds: &AugmentBounds,
    photometric: &PhotometricConfig,
) -> UnlabeledViews {
    match strategy {
        AblationStrategy::StrongWeak => {
            let pair = make_pair(image, "", rng, bounds, photometric);
            UnlabeledViews {
                target: pair.weak_view,
                student: pair.strong_view,
                correspondence: None,
            }
        }
        AblationStrategy::WeakWeak => {
            let ga = sample_geom(rng, bounds);
            let gb = sample_geom(rng, bounds);
            let (h, w) = (image.height, image.width);
            UnlabeledViews {
                target: warp_image(image, &ga),
                student: warp_image(image, &gb),
                correspondence: (ga != gb).then(|| correspondence(&ga, &gb, h, w)),
            }
        }
        AblationStrategy::StrongStrong => {
            let g = sample_geom(rng, bounds);
            let base = warp_image(image, &g);
            let target = strong_photometric(&base, rng, photometric);
            let student = strong_photometric(&base, rng, photometric);
            UnlabeledViews {
                target,
                student,
                correspondence: None,
            }
        }
        AblationStrategy::Original => UnlabeledViews {
            target: image.clone(),
            student: image.clone(),
            correspondence: None,
        },
    }
}
