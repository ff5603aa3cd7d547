//! Dual-network cross pseudo supervision for binary polyp segmentation.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod pseudolabel;
pub mod rng;
pub mod tensor;
pub mod train;

pub use augment::{
    AblationStrategy, AugmentBounds, AugmentedPair, GeomTransform, ImageTensor, PhotometricConfig,
};
pub use data::{DatasetIndex, MaskTensor, Sample};
pub use data::{Fraction, SplitManifest};
pub use error::{Error, ErrorKind, Result};
pub use losses::LossBreakdown;
pub use model::{ArchConfig, BackboneKind, ModelPair, SegModel};
pub use pseudolabel::{ProbabilityMap, PseudoLabel};
pub use tensor::Tensor;
pub use train::TrainConfig;
