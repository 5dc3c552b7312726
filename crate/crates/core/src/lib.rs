//! Segmentation-guided 6D pose estimation kernels.
//!
//! The crate covers the differentiable pieces of a keypoint-based pose
//! network (class-adaptive normalization, object-aware convolution and
//! upsampling, differentiable keypoint regression, the training losses)
//! and the geometric back end that turns decoder outputs into poses
//! (connected components, EPnP inside RANSAC, ADD(-S) and 2D projection
//! metrics). A synthetic scene generator provides exact ground truth.
//!
//! All kernels compute in `f64` on [`FeatureMap`]s; [`Tensor`] is the `f32`
//! on-disk form.

pub mod dkr;
pub mod error;
pub mod gradcheck;
pub mod guided_ops;
pub mod inference_pipeline;
pub mod losses;
pub mod pose_geometry;
pub mod semantic_norm;
pub mod synthgen;
pub mod tensor_io;

pub use error::{Error, Result};
pub use tensor_io::{FeatureMap, Tensor};

/// Book chapters, compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/semantic-normalization.md")]
    mod semantic_normalization {}
    #[doc = include_str!("../../../book/src/object-aware-ops.md")]
    mod object_aware_ops {}
    #[doc = include_str!("../../../book/src/keypoint-regression.md")]
    mod keypoint_regression {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/pose-geometry.md")]
    mod pose_geometry {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/synthetic-scenes.md")]
    mod synthetic_scenes {}
    #[doc = include_str!("../../../book/src/gradients.md")]
    mod gradients {}
}
