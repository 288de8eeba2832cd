//! Desk-scale 3D referring-expression segmentation.
//!
//! A small, dependency-light pipeline that lifts multi-view 2D features onto
//! a point cloud, fuses them with 3D features under a superpoint partition,
//! and decodes a text prompt into per-point masks with a spatially masked
//! attention decoder. Everything runs on CPU in f64 on top of a tape-based
//! autodiff in [`tensor`]; scenes come from the synthetic generator in
//! [`harness`].

pub mod attention;
pub mod cli;
pub mod dense;
pub mod geometry;
pub mod harness;
pub mod loss;
pub mod model;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;
