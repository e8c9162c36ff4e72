//! Class inversion of image classifiers.
//!
//! Starting from noise, an image is optimized so that a frozen classifier
//! assigns it a chosen class. The optimization runs over a progressive
//! resolution schedule and averages the loss over an ensemble of random
//! color-shifted views, so that no explicit image prior needs to be tuned.

pub mod augment;
pub mod config;
pub mod engine;
pub mod error;
pub mod eval;
pub mod graph;
pub mod models;
pub mod regularizers;
mod resample;
pub mod schedule;
pub mod tensor;

pub use config::{
    AugmentationSpec, BaselineAugKind, ImageState, InversionConfig, InversionResult, LossRecord,
    RegularizerWeights, ScheduleMode, Stage, StagePlan,
};
pub use engine::{cosine_lr, invert, invert_with, run_stage, step, Adam, Progress};
pub use error::{PiiError, Result};
pub use models::{Classifier, ClassifierHandle};
pub use schedule::plan_stages;
pub use tensor::Tensor;
