//! File formats and the scene directory layout.

mod grid;
mod landmarks;
mod manifest;
mod model;
mod obj;
mod ply;
mod scene;

use std::path::Path;

pub use grid::{read_grid, write_grid, GridTensor, HEADER_LEN, MAGIC, VERSION};
pub use landmarks::{landmarks_string, parse_landmarks, read_landmarks, write_landmarks};
pub use manifest::{cameras_json, load_scene, read_cameras, CameraEntry, LoadedScene, SceneManifest, ViewEntry};
pub use model::{model_bytes, parse_model, read_model, write_model};
pub use obj::{
    obj_string, parse_mesh_obj, parse_template_obj, read_mesh_obj, read_template_obj, write_obj, write_template_obj,
};
pub use ply::{parse_ply, ply_bytes, read_ply, write_ply};
pub use scene::{write_scene, SceneSummary, GT_CAMERAS, GT_MESH, LANDMARKS, MANIFEST, MODEL, SUMMARY, TEMPLATE};

use crate::geometry::Mesh;
use crate::{Error, Result};

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Reads an OBJ or PLY mesh, chosen by extension.
pub fn read_mesh(path: &Path) -> Result<Mesh> {
    match extension(path).as_str() {
        "obj" => read_mesh_obj(path),
        "ply" => read_ply(path),
        other => Err(Error::format(path, format!("unknown mesh extension {other:?}; expected .obj or .ply"))),
    }
}

/// Writes an OBJ (with `uv` when given) or a binary PLY (with `quality` when
/// given), chosen by extension.
pub fn write_mesh(path: &Path, mesh: &Mesh, uv: Option<&[crate::Vec2]>, quality: Option<&[f64]>) -> Result<()> {
    match extension(path).as_str() {
        "obj" => write_obj(path, &mesh.positions, uv, &mesh.faces),
        "ply" => write_ply(path, mesh, quality),
        other => Err(Error::format(path, format!("unknown mesh extension {other:?}; expected .obj or .ply"))),
    }
}
