//! Isosurface reconstruction with 3D Gaussian splatting, trained on one or
//! many cooperating CPU workers.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`volume`] loads a raw scalar volume and extracts an isosurface point cloud.
//! 2. [`camera`] builds an orbit of pinhole cameras around the volume.
//! 3. [`reference_renderer`] raycasts the isosurface to produce ground-truth views.
//! 4. [`gaussian_model`] + [`rasterizer`] + [`training`] fit Gaussian primitives
//!    to those views.
//! 5. [`distributed`] runs the same training sharded over `W` workers with
//!    results bitwise identical to the single-worker loop.
//!
//! [`bench`] reproduces the scaling-table methodology at desk scale.

// NaN-rejecting `!(x > 0.0)` checks and index loops in the numeric kernels are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bench;
pub mod camera;
pub mod dataset;
pub mod distributed;
mod error;
pub mod gaussian_model;
pub mod image;
pub mod rasterizer;
mod real;
pub mod reference_renderer;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use real::Real;
