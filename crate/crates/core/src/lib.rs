//! Super-resolved feature upsampling for feature pyramid networks.
//!
//! A generator learns to upsample pyramid features by 2x, replacing the
//! fixed interpolation in the top-down pathway of a feature pyramid. The crate
//! contains a small reverse-mode autodiff engine, the networks, losses,
//! three-stage training pipeline, synthetic data and COCO-style evaluation.

pub mod autograd;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod generator;
pub mod head;
pub mod losses;
pub mod nn;
pub mod ops;
pub mod pyramid;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Gradients, Param, ParamKey, Var};
pub use error::{Error, Result};
pub use nn::{Ctx, Mode, Module};
pub use ops::{resize, Interpolation, ResizeSpec};
pub use tensor::{Float, Tensor};
pub use discriminator::Discriminator;
pub use extractor::{Extractor, ExtractorConfig, Upsampler};
pub use generator::Generator;
pub use head::{Detection, DetectionTargets, Detector, Head, HeadConfig, LevelMask, SizeRanges};
pub use losses::LossReport;
pub use pyramid::{FeatureMap, FeaturePyramid, Image};
pub use data::{Dataset, Sample};
pub use train::{derive_seed, TrainConfig};
pub use eval::{EvalReport, Runner, Suite};
