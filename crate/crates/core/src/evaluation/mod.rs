//! Measurement protocol: landmark-based alignment of a reconstruction to a
//! reference mesh, then point-to-surface distance statistics.

mod align;
mod bvh;
mod chamfer;

pub use align::{rigid_align, umeyama, LandmarkSet, LandmarkSource, Similarity, LANDMARK_COUNT};
pub use bvh::{closest_point_on_triangle, point_triangle_distance, Bvh, ClosestPoint};
pub use chamfer::{
    aligned_vertex_errors, brute_force_distances, chamfer_stats, sample_surface, summarize, vertex_errors, ChamferConfig, ChamferReport,
    Summary,
};
