//! Segmentation quality and speed measurement, plus published reference
//! numbers for comparison.

use std::time::Instant;

use serde::Serialize;

use crate::data::{MaskTensor, Sample};
use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::tensor::Tensor;

/// Dataset-level confusion counts, `counts[truth * k + predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn pixels(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, predicted: &[u8], truth: &[u8]) -> Result<()> {
        if predicted.len() != truth.len() {
            return Err(Error::Shape(format!(
                "{} predicted pixels against {} ground-truth pixels",
                predicted.len(),
                truth.len()
            )));
        }
        let k = self.classes;
        for (&p, &t) in predicted.iter().zip(truth) {
            let (p, t) = (p as usize, t as usize);
            if p >= k || t >= k {
                return Err(Error::Shape(format!(
                    "class id {} outside {k} classes",
                    p.max(t)
                )));
            }
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Intersection over union per class; `None` where the class is absent
    /// from both prediction and truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.count(c, c);
                let truth: u64 = (0..self.classes).map(|p| self.count(c, p)).sum();
                let pred: u64 = (0..self.classes).map(|t| self.count(t, c)).sum();
                let union = truth + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in prediction or truth; `None` when
    /// no pixel has been counted.
    pub fn miou(&self) -> Option<f64> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// Per-pixel argmax over the class axis of a `(B, K, H, W)` tensor; ties go
/// to the lower class.
pub fn argmax_labels(scores: &Tensor) -> Result<Vec<Vec<u8>>> {
    let (b, k, h, w) = scores.dims4()?;
    let hw = h * w;
    Ok((0..b)
        .map(|i| {
            let s = &scores.data()[i * k * hw..(i + 1) * k * hw];
            (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if s[c * hw + p] > s[best * hw + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}

/// Anything that maps an image batch to class labels.
pub trait Segmenter {
    fn classes(&self) -> usize;

    /// Labels for each image of an `(B, 3, H, W)` batch.
    fn segment(&self, images: &Tensor) -> Result<Vec<Vec<u8>>>;
}

impl Segmenter for SegModel {
    fn classes(&self) -> usize {
        self.arch().class_count
    }

    fn segment(&self, images: &Tensor) -> Result<Vec<Vec<u8>>> {
        argmax_labels(&self.predict_logits(images)?)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub pixels: u64,
    pub seconds_per_image: f64,
}

/// Batches of consecutive same-sized samples.
fn batches(samples: &[Sample], max: usize) -> Vec<&[Sample]> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < samples.len() {
        let size = (samples[start].image.height(), samples[start].image.width());
        let mut end = start + 1;
        while end < samples.len()
            && end - start < max
            && (samples[end].image.height(), samples[end].image.width()) == size
        {
            end += 1;
        }
        out.push(&samples[start..end]);
        start = end;
    }
    out
}

pub fn stack_images(samples: &[Sample]) -> Result<Tensor> {
    let ts: Vec<Tensor> = samples.iter().map(|s| s.image.to_tensor()).collect();
    Tensor::stack(&ts.iter().collect::<Vec<_>>())
}

/// Dataset-aggregated mIoU of `model` over `samples`.
pub fn evaluate(model: &dyn Segmenter, samples: &[Sample], batch: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut cm = ConfusionMatrix::new(model.classes());
    let start = Instant::now();
    for chunk in batches(samples, batch.max(1)) {
        let labels = model.segment(&stack_images(chunk)?)?;
        for (pred, s) in labels.iter().zip(chunk) {
            cm.accumulate(pred, s.mask.labels())?;
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(EvalReport {
        miou: cm.miou().unwrap_or(0.0),
        per_class_iou: cm.per_class_iou(),
        pixels: cm.pixels(),
        seconds_per_image: seconds / samples.len() as f64,
    })
}

/// mIoU of predicted masks against ground truth.
pub fn miou(predicted: &[MaskTensor], truth: &[MaskTensor], classes: usize) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(
            "prediction and ground-truth counts differ".into(),
        ));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (p, t) in predicted.iter().zip(truth) {
        cm.accumulate(p.labels(), t.labels())?;
    }
    cm.miou()
        .ok_or_else(|| Error::Data("no pixels to evaluate".into()))
}

/// Median single-image inference seconds over `runs` timed passes after
/// `warmup` untimed ones.
pub fn time_inference(
    model: &dyn Segmenter,
    image: &Tensor,
    warmup: usize,
    runs: usize,
) -> Result<f64> {
    let (b, ..) = image.dims4()?;
    if b != 1 || runs == 0 {
        return Err(Error::Usage(
            "timing needs one image and at least one run".into(),
        ));
    }
    for _ in 0..warmup {
        model.segment(image)?;
    }
    let mut times: Vec<f64> = (0..runs)
        .map(|_| {
            let t = Instant::now();
            model.segment(image).map(|_| t.elapsed().as_secs_f64())
        })
        .collect::<Result<_>>()?;
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    })
}

/// Labeled fractions of the published comparison, as denominators.
pub const REFERENCE_FRACTIONS: [u64; 4] = [2, 4, 8, 16];

/// mIoU (%) by method at labeled fractions 1/2, 1/4, 1/8 and 1/16.
pub const REFERENCE_MIOU: [(&str, [f64; 4]); 5] = [
    ("CPC", [77.91, 76.10, 73.01, 67.36]),
    ("CPS", [78.47, 76.74, 75.66, 70.50]),
    ("ELN", [75.23, 73.14, 71.19, 71.12]),
    ("ACL-Net", [80.07, 76.94, 74.83, 71.27]),
    ("DFCPS", [80.12, 77.42, 76.53, 72.39]),
];

/// Training hours per epoch and inference seconds per image, by method.
pub const REFERENCE_COST: [(&str, f64, f64); 5] = [
    ("CPC", 4.7, 2.60),
    ("CPS", 5.1, 2.44),
    ("ELN", 5.7, 2.71),
    ("ACL-Net", 5.9, 2.53),
    ("DFCPS", 5.3, 2.37),
];

/// mIoU (%) by augmentation strategy at the same fractions.
pub const REFERENCE_ABLATION: [(&str, [f64; 4]); 4] = [
    ("strong-weak", [80.12, 77.42, 76.53, 72.39]),
    ("weak-weak", [79.75, 77.28, 76.45, 71.77]),
    ("strong-strong", [79.63, 77.04, 76.28, 71.23]),
    ("original", [78.47, 76.74, 75.66, 70.50]),
];

fn lookup(table: &[(&str, [f64; 4])], row: &str, denominator: u64) -> Option<f64> {
    let col = REFERENCE_FRACTIONS.iter().position(|&d| d == denominator)?;
    table
        .iter()
        .find(|(name, _)| *name == row)
        .map(|(_, v)| v[col])
}

/// Reference mIoU (%) for a method or strategy at labeled fraction
/// `1/denominator`.
pub fn reference_miou(name: &str, denominator: u64) -> Option<f64> {
    lookup(&REFERENCE_MIOU, name, denominator)
        .or_else(|| lookup(&REFERENCE_ABLATION, name, denominator))
}

/// `measured - reference` in percentage points, where a reference exists.
pub fn compare_to_reference(name: &str, denominator: u64, measured_percent: f64) -> Option<f64> {
    reference_miou(name, denominator).map(|r| measured_percent - r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_example() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap();
        // Background IoU 2/3, foreground 1/2.
        assert!((cm.miou().unwrap() - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_absent_classes() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 1], &[0, 1, 1]).unwrap();
        assert_eq!(cm.per_class_iou(), vec![Some(1.0), Some(1.0), None]);
        assert_eq!(cm.miou(), Some(1.0));
        assert_eq!(ConfusionMatrix::new(2).miou(), None);
    }

    #[test]
    fn rejects_bad_input() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&[0], &[0, 1]).is_err());
        assert!(cm.accumulate(&[2], &[0]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::from_vec(&[1, 2, 1, 2], vec![0.5, 0.2, 0.5, 0.8]).unwrap();
        assert_eq!(argmax_labels(&t).unwrap(), vec![vec![0, 1]]);
    }

    #[test]
    fn reference_lookup() {
        assert_eq!(reference_miou("DFCPS", 8), Some(76.53));
        assert_eq!(reference_miou("weak-weak", 16), Some(71.77));
        assert_eq!(reference_miou("DFCPS", 3), None);
        let d = compare_to_reference("CPS", 2, 80.0).unwrap();
        assert!((d - 1.53).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn bounded_and_merge_additive(
            a in proptest::collection::vec((0u8..3, 0u8..3), 1..60),
            b in proptest::collection::vec((0u8..3, 0u8..3), 1..60),
        ) {
            let split = |v: &[(u8, u8)]| -> (Vec<u8>, Vec<u8>) { v.iter().copied().unzip() };
            let (pa, ta) = split(&a);
            let (pb, tb) = split(&b);
            let mut x = ConfusionMatrix::new(3);
            x.accumulate(&pa, &ta).unwrap();
            let mut y = ConfusionMatrix::new(3);
            y.accumulate(&pb, &tb).unwrap();
            let mut all = ConfusionMatrix::new(3);
            all.accumulate(&[pa, pb].concat(), &[ta, tb].concat()).unwrap();
            x.merge(&y);
            prop_assert_eq!(&x, &all);
            let m = all.miou().unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }
}
