//! Ground-truth-free evaluation of dense RGB-D reconstructions.
//!
//! A reconstructed surfel model is re-rendered into every observed depth
//! frame and scored by the summed squared depth residual (the dense map
//! posterior, DMP). Lower is better; differences between two models on the
//! same observations give their log-likelihood ratio. Trajectory and surface
//! baselines (ATE, RPE, SMD), a small SE(3) pose-graph optimizer and a
//! loop-candidate ranking pipeline sit alongside, together with an analytic
//! scene generator used for testing.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod loops;
pub mod metrics;
pub mod par;
pub mod pose_graph;
pub mod render;
pub mod report;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{backproject, project, se3_exp, se3_log, DepthImage, Intrinsics, Pose};
