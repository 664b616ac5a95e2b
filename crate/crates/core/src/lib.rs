//! Template-consistent face reconstruction from per-view point maps and UV
//! images.
//!
//! The pipeline turns UV-coordinate images into screen-space tracks for every
//! template vertex ([`correspondence`]), averages the per-view point maps into
//! an initial cloud ([`fusion`]), and refines cameras and points with a
//! Laplacian-regularized bundle adjustment ([`solver`]). The output shares the
//! template's face list, so vertices correspond across reconstructions.
//!
//! [`evaluation`] implements landmark alignment and chamfer statistics,
//! [`morphable`] a linear-shape-model fitting baseline, and [`synth`] a
//! synthetic scene generator with full ground truth.

pub mod correspondence;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod morphable;
pub mod pipeline;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};

pub type Vec2 = nalgebra::Vector2<f64>;
pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
