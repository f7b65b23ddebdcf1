//! Depth-driven differentiable image warping for camera pose refinement.
//!
//! Given two RGB-D frames with known intrinsics, this crate warps the
//! previous frame's pixels into the current view through per-pixel depth and
//! the relative camera motion, then scores photometric consistency with a
//! masked L1 term, an image-level structural-similarity term and a Euclidean
//! pose-distance term. All three combine into one weighted objective whose
//! analytic gradient with respect to both camera poses drives a first-order
//! refinement loop.
//!
//! Modules:
//! - [`geometry`]: poses, quaternions, pinhole projection, relative motion
//! - [`imaging`]: image/depth/mask buffers, bilinear sampling, statistics
//! - [`warp`]: the per-pixel warp and warped-image synthesis
//! - [`loss`]: the loss terms and their pose gradients
//! - [`align`]: gradient-descent pose refinement and the FD gradient oracle
//! - [`synth`]: analytic plane scenes used as ground-truth oracles
//! - [`dataset`]: RGB-D sequence IO, resizing, depth sparsification
//! - [`report`]: median error metrics and CSV/JSON report emission
//!
//! Per-pixel inner loops run row-parallel on rayon when the default
//! `parallel` feature is enabled and sequentially otherwise; results are
//! bit-identical in both modes.

pub mod align;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod loss;
mod parallel;
pub mod report;
pub mod synth;
pub mod warp;

pub use align::{
    fd_gradient, perturb_pose, random_perturbation, refine_poses, AlignConfig, AlignReport,
};
pub use error::{Error, Result};
pub use geometry::{
    relative_transform, rotation_angle_deg, Intrinsics, Pose, Quaternion, RigidTransform,
};
pub use imaging::{
    bilinear_sample, image_stats, mask_and, to_grayscale, DepthMap, ImageBuffer, PixelMask,
};
pub use loss::{
    euclidean_pose_loss, photometric_loss, ssim, ssim_loss, total_loss, total_loss_gradient,
    FrameData, FramePair, LossBreakdown, LossOptions, LossWeights, SupervisionMode,
};
pub use report::{emit_align_report, emit_error_table, pose_errors, ErrorTable, ReportFormat};
pub use synth::SyntheticScene;
pub use warp::{warp_image, warp_pixel, WarpResult};
