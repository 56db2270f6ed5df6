//! Learned point-line maps for camera localization.
//!
//! A scene is represented by a small network that regresses 3D points and
//! 3D line endpoints (with reliabilities) directly from 2D feature
//! descriptors. Poses are then recovered by robust PnP over the predicted
//! point and line correspondences.
//!
//! Modules, roughly bottom-up:
//! - [`diffcore`]: tape-based reverse-mode autodiff on dense matrices
//! - [`geometry`]: poses, pinhole projection, reprojection residuals
//! - [`model`]: line token encoder, point/line attention layers, heads
//! - [`losses`]: map / reliability / reprojection objectives
//! - [`training`]: Adam loop, schedules, augmentation, pose metrics
//! - [`pose`]: P3P, RANSAC, and point+line refinement
//! - [`dataio`]: scene datasets, synthetic scenes, checkpoints, map export

pub mod dataio;
pub mod diffcore;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod pose;
pub mod training;
