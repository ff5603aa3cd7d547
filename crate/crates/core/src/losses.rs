//! Supervised and cross-pseudo-supervision objectives.
//!
//! All cross-entropies are masked means: each image contributes the mean
//! `-ln p[target]` over its kept pixels (zero when nothing is kept), and a
//! batch loss is the mean of its images' contributions. Probabilities are
//! clamped to `[PROB_FLOOR, 1]` before the logarithm.
//!
//! Targets (ground truth or pseudo-labels) are plain integer arrays, never
//! differentiable values, so no gradient can reach the network that
//! produced a pseudo-label through its role as a target.

use crate::data::MaskTensor;
use crate::error::{Error, Result};
use crate::pseudolabel::{ProbabilityMap, PseudoLabel};

pub const PROB_FLOOR: f64 = 1e-12;

/// Masked mean NLL of one image. `prob` is `(K, H*W)`.
pub(crate) fn masked_nll(prob: &[f64], k: usize, targets: &[u8], keep: &[bool]) -> Result<f64> {
    let hw = targets.len();
    let mut sum = 0.0;
    let mut kept = 0usize;
    for p in 0..hw {
        if !keep[p] {
            continue;
        }
        let t = targets[p] as usize;
        if t >= k {
            return Err(Error::Shape(format!("target class {t} with {k} classes")));
        }
        sum -= prob[t * hw + p].clamp(PROB_FLOOR, 1.0).ln();
        kept += 1;
    }
    Ok(if kept == 0 { 0.0 } else { sum / kept as f64 })
}

/// Adds `scale * d(masked_nll)/d(prob)` into `out`.
pub(crate) fn masked_nll_grad(
    prob: &[f64],
    _k: usize,
    targets: &[u8],
    keep: &[bool],
    scale: f64,
    out: &mut [f64],
) {
    let hw = targets.len();
    let kept = keep.iter().filter(|&&k| k).count();
    if kept == 0 {
        return;
    }
    let scale = scale / kept as f64;
    for p in 0..hw {
        if !keep[p] {
            continue;
        }
        let i = targets[p] as usize * hw + p;
        let v = prob[i];
        if v > PROB_FLOOR && v <= 1.0 {
            out[i] -= scale / v;
        }
    }
}

fn check_same(prob: &ProbabilityMap, h: usize, w: usize) -> Result<()> {
    if prob.height() != h || prob.width() != w {
        return Err(Error::Shape(format!(
            "probabilities {}x{} against targets {h}x{w}",
            prob.height(),
            prob.width()
        )));
    }
    Ok(())
}

/// Mean cross-entropy over the kept pixels of one image; 0 if none are kept.
pub fn pixel_ce(prob: &ProbabilityMap, target: &[u8], keep: &[bool]) -> Result<f64> {
    if target.len() != prob.pixels() || keep.len() != prob.pixels() {
        return Err(Error::Shape(format!(
            "{} targets / {} keep flags for {} pixels",
            target.len(),
            keep.len(),
            prob.pixels()
        )));
    }
    masked_nll(prob.data(), prob.classes(), target, keep)
}

fn ce_against(prob: &ProbabilityMap, target: &PseudoLabel) -> Result<f64> {
    check_same(prob, target.height, target.width)?;
    pixel_ce(prob, &target.labels, &target.keep)
}

fn batch_len(lens: &[usize]) -> Result<usize> {
    let n = lens[0];
    if lens.iter().any(|&l| l != n) {
        return Err(Error::Shape(format!("batch sizes differ: {lens:?}")));
    }
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(n)
}

/// Both networks against the same ground truth, every pixel kept.
pub fn supervised_loss(
    p1: &[ProbabilityMap],
    p2: &[ProbabilityMap],
    gt: &[MaskTensor],
) -> Result<f64> {
    let n = batch_len(&[p1.len(), p2.len(), gt.len()])
        .map_err(|e| Error::Shape(format!("labeled batch: {e}")))?;
    let mut total = 0.0;
    for ((a, b), y) in p1.iter().zip(p2).zip(gt) {
        check_same(a, y.height(), y.width())?;
        check_same(b, y.height(), y.width())?;
        let keep = vec![true; y.len()];
        total += pixel_ce(a, y.labels(), &keep)? + pixel_ce(b, y.labels(), &keep)?;
    }
    Ok(total / n as f64)
}

/// Each group's strong-view prediction against its own weak-view pseudo-label.
pub fn cps_unlabeled_loss(
    ps1: &[ProbabilityMap],
    ps2: &[ProbabilityMap],
    y1: &[PseudoLabel],
    y2: &[PseudoLabel],
) -> Result<f64> {
    let n = batch_len(&[ps1.len(), ps2.len(), y1.len(), y2.len()])?;
    let mut total = 0.0;
    for i in 0..n {
        total += ce_against(&ps1[i], &y1[i])? + ce_against(&ps2[i], &y2[i])?;
    }
    Ok(total / n as f64)
}

/// Each group's weak-view prediction against the OTHER group's pseudo-label,
/// masked by that target's keep-mask.
pub fn cps_weak_cross_loss(
    pw1: &[ProbabilityMap],
    pw2: &[ProbabilityMap],
    y1: &[PseudoLabel],
    y2: &[PseudoLabel],
) -> Result<f64> {
    let n = batch_len(&[pw1.len(), pw2.len(), y1.len(), y2.len()])?;
    let mut total = 0.0;
    for i in 0..n {
        total += ce_against(&pw1[i], &y2[i])? + ce_against(&pw2[i], &y1[i])?;
    }
    Ok(total / n as f64)
}

/// Loss components of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_cps_u: f64,
    pub l_cps_l: f64,
    pub omega: f64,
    pub total: f64,
    /// Share of unlabeled pseudo-label pixels that passed the confidence filter.
    pub retained_fraction: f64,
}

/// `l_s + omega * (l_cps_l + l_cps_u)`.
pub fn total_loss(l_s: f64, l_cps_u: f64, l_cps_l: f64, omega: f64) -> Result<LossBreakdown> {
    for (name, v) in [
        ("l_s", l_s),
        ("l_cps_u", l_cps_u),
        ("l_cps_l", l_cps_l),
        ("omega", omega),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is {v}")));
        }
    }
    if omega < 0.0 {
        return Err(Error::Usage(format!(
            "omega must be non-negative, got {omega}"
        )));
    }
    Ok(LossBreakdown {
        l_s,
        l_cps_u,
        l_cps_l,
        omega,
        total: l_s + omega * (l_cps_l + l_cps_u),
        retained_fraction: 1.0,
    })
}
