//! Per-pixel class probabilities, hardened pseudo-labels and the confidence
//! filter that decides which pseudo-labelled pixels may supervise.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Confidence threshold used when none is configured.
pub const DEFAULT_TAU: f64 = 0.95;

/// Tolerance on the per-pixel simplex constraint.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Class probabilities of one image, laid out `(K, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ProbabilityMap {
    /// Validates values in `[0, 1]` and per-pixel sums of one.
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if classes == 0 || classes > u8::MAX as usize + 1 {
            return Err(Error::Shape(format!("unsupported class count {classes}")));
        }
        if data.len() != classes * height * width {
            return Err(Error::Shape(format!(
                "{} probabilities for a {classes}x{height}x{width} map",
                data.len()
            )));
        }
        let hw = height * width;
        for p in 0..hw {
            let mut sum = 0.0;
            for k in 0..classes {
                let v = data[k * hw + p];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Numeric(format!("probability {v} outside [0, 1]")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Numeric(format!(
                    "probabilities at pixel {p} sum to {sum}"
                )));
            }
        }
        Ok(Self {
            classes,
            height,
            width,
            data,
        })
    }

    /// Splits a `(B, K, H, W)` tensor of probabilities into per-image maps.
    pub fn from_batch(batch: &Tensor) -> Result<Vec<Self>> {
        let (b, k, h, w) = batch.dims4()?;
        (0..b)
            .map(|i| Self::new(k, h, w, batch.index_outer(i).into_data()))
            .collect()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, class: usize, y: usize, x: usize) -> f64 {
        self.data[(class * self.height + y) * self.width + x]
    }
}

/// Numerically stable per-pixel softmax of `(K, H, W)` logits.
pub fn softmax_map(logits: &Tensor) -> Result<ProbabilityMap> {
    let [k, h, w] = logits.shape()[..] else {
        return Err(Error::Shape(format!(
            "expected (K, H, W) logits, got {:?}",
            logits.shape()
        )));
    };
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let hw = h * w;
    let x = logits.data();
    let mut out = vec![0.0; x.len()];
    for p in 0..hw {
        let max = (0..k)
            .map(|c| x[c * hw + p])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..k {
            let e = (x[c * hw + p] - max).exp();
            out[c * hw + p] = e;
            sum += e;
        }
        for c in 0..k {
            out[c * hw + p] /= sum;
        }
    }
    ProbabilityMap::new(k, h, w, out)
}

/// Hardened per-pixel targets with their confidence keep-mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    pub keep: Vec<bool>,
    pub tau: f64,
}

impl PseudoLabel {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn retained_fraction(&self) -> f64 {
        if self.keep.is_empty() {
            0.0
        } else {
            self.kept() as f64 / self.keep.len() as f64
        }
    }
}

/// Argmax labels (ties resolve to the lower class index) and the mask of
/// pixels whose top probability reaches `tau`. `tau > 1` keeps nothing.
pub fn harden(prob: &ProbabilityMap, tau: f64) -> PseudoLabel {
    harden_slice(
        prob.data(),
        prob.classes(),
        prob.height(),
        prob.width(),
        tau,
    )
}

pub(crate) fn harden_slice(
    data: &[f64],
    classes: usize,
    height: usize,
    width: usize,
    tau: f64,
) -> PseudoLabel {
    let hw = height * width;
    let mut labels = vec![0u8; hw];
    let mut keep = vec![false; hw];
    for p in 0..hw {
        let mut best = 0;
        let mut best_p = data[p];
        for k in 1..classes {
            let v = data[k * hw + p];
            if v > best_p {
                best = k;
                best_p = v;
            }
        }
        labels[p] = best as u8;
        keep[p] = best_p >= tau;
    }
    PseudoLabel {
        height,
        width,
        labels,
        keep,
        tau,
    }
}

/// Hardens every image of a `(B, K, H, W)` probability tensor.
pub fn harden_batch(prob: &Tensor, tau: f64) -> Result<Vec<PseudoLabel>> {
    let (b, k, h, w) = prob.dims4()?;
    let len = k * h * w;
    Ok((0..b)
        .map(|i| harden_slice(&prob.data()[i * len..(i + 1) * len], k, h, w, tau))
        .collect())
}
