//! Pure kernels for trajectory-conditioned image-to-video generation.
//!
//! Everything here runs on `alloc` alone: value types with shape and range
//! invariants, click-trajectory decoding into sparse and dense optical flow,
//! forward bilinear splatting, the diffusion noise schedule, evaluation
//! metrics, and a synthetic moving-shapes renderer with exact ground truth.
//! IO, neural networks and the command line live in the `trajvid` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod colormap;
pub mod error;
pub mod flow_estimate;
pub mod image_ops;
pub mod linalg;
pub mod math;
pub mod metrics;
pub mod scene;
pub mod schedule;
pub mod tensor;
pub mod trajectory;
pub mod warp;

pub use error::CoreError;
pub use tensor::{
    ColorSpace, FeatureMap, FeaturePyramid, FlowField, Frame, PyramidBranch, Validate,
    ValidationReport, VideoTensor, Violation, ViolationKind,
};
