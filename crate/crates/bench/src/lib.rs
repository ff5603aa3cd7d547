//! Deterministic inputs shared by the benchmarks.

use dfcps::data::MaskTensor;
use dfcps::train::{LabeledBatch, UnlabeledBatch};
use dfcps::Tensor;

/// Scrambled values in `[0, 1)`, fixed by `seed`.
pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n as u64)
        .map(|i| {
            (i.wrapping_mul(2_654_435_761)
                .wrapping_add(seed.wrapping_mul(40_503))
                % 10_007) as f64
                / 10_007.0
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

/// Left half background, right half foreground.
pub fn half_mask(side: usize) -> MaskTensor {
    let labels = (0..side * side)
        .map(|i| u8::from(i % side >= side / 2))
        .collect();
    MaskTensor::new(side, side, labels).expect("binary labels")
}

pub fn labeled(batch: usize, side: usize) -> LabeledBatch {
    LabeledBatch {
        images: uniform(&[batch, 3, side, side], 1),
        masks: (0..batch).map(|_| half_mask(side)).collect(),
    }
}

pub fn unlabeled(batch: usize, side: usize) -> UnlabeledBatch {
    UnlabeledBatch {
        target: uniform(&[batch, 3, side, side], 2),
        student: uniform(&[batch, 3, side, side], 3),
        correspondence: vec![None; batch],
    }
}
