//! Fits an invertible, deformable scene representation to a stereo video at
//! test time and answers long-term 2D/3D point tracking, depth, and novel-view
//! queries from the optimised model.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`] — pinhole cameras, rays, stereo triangulation, workspace
//!   contraction.
//! * [`autodiff`] — a reverse-mode tape sized for the models in this crate.
//! * [`fields`] — multi-scale six-plane feature grids with density/colour heads.
//! * [`deform`] — the invertible, time-conditioned workspace↔canonical map.
//! * [`render`] — ray sampling, density-to-weight conversion, pixel rendering,
//!   and the full long-term correspondence pipeline.
//! * [`losses`] — the joint objective over image plane, workspace, and
//!   canonical space.
//! * [`sampler`] — error-map driven pixel and frame-pair sampling.
//! * [`io`] — scene ingestion, the synthetic ground-truth generator,
//!   checkpoints, and track export.
//! * [`engine`] — the optimisation loop, query-time tracking, and metrics.

pub mod autodiff;
pub mod deform;
pub mod fields;
pub mod geometry;
pub mod model;
pub mod render;

pub use geometry::{
    CameraIntrinsics, CameraPose, Pixel, Ray, UnitCubePoint, WorkspaceBox, WorldPoint,
};
