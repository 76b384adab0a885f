//! Desk-scale laboratory for asking where domain-specific visual attributes
//! live in a projection + decoder multimodal model.
//!
//! The pipeline fine-tunes a toy model in two regimes (projection only, and
//! end to end), then trains an independent fixed-architecture probe on the
//! post-projection image tokens of each setting to measure how much task
//! information the projection output carries.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod finetune;
pub mod format;
pub mod gradcheck;
pub mod lm;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod probe;
pub mod projection;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod zeroshot;

pub use error::{Error, Result};
pub use tensor::Tensor;
