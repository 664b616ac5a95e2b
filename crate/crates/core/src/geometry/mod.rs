//! Cameras, template topology, and per-view inputs.

pub mod camera;
pub mod mesh;
pub mod view;

pub use camera::{project, Camera, CameraIntrinsics, CameraPose};
pub use mesh::{laplacian_vector, precompute_neighborhoods, Mesh, TemplateMesh};
pub use view::ViewPrediction;
