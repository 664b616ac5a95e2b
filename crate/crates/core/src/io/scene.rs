//! Writes a synthetic scene in the layout `load_scene` reads, plus its
//! ground truth.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::grid::{write_grid, GridTensor};
use super::landmarks::write_landmarks;
use super::manifest::{cameras_json, CameraEntry, SceneManifest, ViewEntry};
use super::model::write_model;
use super::obj::write_template_obj;
use super::ply::write_ply;
use crate::evaluation::LandmarkSource;
use crate::morphable::LinearShapeModel;
use crate::synth::Scene;
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const TEMPLATE: &str = "template.obj";
pub const LANDMARKS: &str = "landmarks.txt";
pub const GT_MESH: &str = "gt_mesh.ply";
pub const GT_CAMERAS: &str = "gt_cameras.json";
pub const SUMMARY: &str = "synth.json";
pub const MODEL: &str = "model.tgrd";

/// Facts about a generated scene that are not in the other files.
#[derive(Clone, Debug, Serialize)]
pub struct SceneSummary {
    pub seed: u64,
    pub n_vertices: usize,
    pub n_views: usize,
    pub image_size: usize,
    pub half_pixel_bound: f64,
    pub occluded: Vec<usize>,
    /// Ground-truth visible view count per vertex.
    pub track_counts: Vec<usize>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `scene` under `dir`, creating it if needed, and returns the
/// manifest path.
pub fn write_scene(dir: &Path, scene: &Scene, seed: u64, model: Option<&LinearShapeModel>) -> Result<PathBuf> {
    let views_dir = dir.join("views");
    std::fs::create_dir_all(&views_dir).map_err(|e| Error::io(&views_dir, e))?;
    let mut entries = Vec::with_capacity(scene.views.len());
    for (i, view) in scene.views.iter().enumerate() {
        let pm = PathBuf::from(format!("views/view_{i:02}_points.tgrd"));
        let uv = PathBuf::from(format!("views/view_{i:02}_uv.tgrd"));
        write_grid(&dir.join(&pm), &GridTensor::from_pixels(view.height(), view.width(), view.point_map())?)?;
        write_grid(&dir.join(&uv), &GridTensor::from_pixels(view.height(), view.width(), view.uv_image())?)?;
        entries.push(ViewEntry {
            point_map: pm,
            uv_image: uv,
            camera: CameraEntry::from_camera(&view.camera()),
        });
    }
    write_template_obj(&dir.join(TEMPLATE), &scene.template)?;
    write_landmarks(&dir.join(LANDMARKS), &LandmarkSource::Vertices(scene.landmarks.clone()))?;
    write_ply(&dir.join(GT_MESH), &scene.ground_truth, None)?;
    write_text(&dir.join(GT_CAMERAS), &cameras_json(&scene.cameras))?;
    let summary = SceneSummary {
        seed,
        n_vertices: scene.template.len(),
        n_views: scene.views.len(),
        image_size: scene.views.first().map_or(0, |v| v.width()),
        half_pixel_bound: scene.half_pixel_bound(),
        occluded: scene.occluded.clone(),
        track_counts: scene.tracks.track_counts(),
    };
    write_text(&dir.join(SUMMARY), &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    if let Some(m) = model {
        write_model(&dir.join(MODEL), m)?;
    }
    let manifest = SceneManifest {
        template: PathBuf::from(TEMPLATE),
        landmarks: Some(PathBuf::from(LANDMARKS)),
        views: entries,
    };
    let path = dir.join(MANIFEST);
    manifest.write(&path)?;
    Ok(path)
}
