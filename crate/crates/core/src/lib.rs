//! Core library: second-order autodiff, a small fully convolutional
//! segmenter, synthetic two-domain volumes, overlap metrics, task ordering,
//! and meta-tuning engines.

#![forbid(unsafe_code)]

pub mod autodiff;
pub mod metrics;
pub mod metatune;
pub mod rng;
pub mod sampler;
pub mod segnet;
pub mod synthdata;
pub mod tensor;
