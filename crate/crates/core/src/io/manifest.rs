//! Scene manifests: a JSON document listing each view's grid files and
//! camera, the template mesh, and optional landmarks. Relative paths resolve
//! against the manifest's directory.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::read_grid;
use super::landmarks::read_landmarks;
use super::obj::read_template_obj;
use crate::evaluation::LandmarkSource;
use crate::geometry::{Camera, CameraIntrinsics, CameraPose, TemplateMesh, ViewPrediction};
use crate::{Error, Mat3, Result, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub intrinsics: CameraIntrinsics,
    /// World-to-camera rotation, row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl CameraEntry {
    pub fn from_camera(camera: &Camera) -> Self {
        let r = camera.pose.rotation();
        let t = camera.pose.translation();
        Self {
            intrinsics: camera.intrinsics,
            rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        self.intrinsics.validate()?;
        Ok(Camera {
            intrinsics: self.intrinsics,
            pose: CameraPose::from_matrix(Mat3::from_row_slice(&self.rotation), Vec3::from(self.translation))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub point_map: PathBuf,
    pub uv_image: PathBuf,
    #[serde(flatten)]
    pub camera: CameraEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub template: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<PathBuf>,
    pub views: Vec<ViewEntry>,
}

impl SceneManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        if m.views.len() < 2 {
            return Err(Error::format(path, format!("need at least 2 views, found {}", m.views.len())));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Everything a manifest points to, loaded and validated.
#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub views: Vec<ViewPrediction>,
    pub template: TemplateMesh,
    pub landmarks: Option<LandmarkSource>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_view(base: &Path, entry: &ViewEntry) -> Result<ViewPrediction> {
    let pm_path = resolve(base, &entry.point_map);
    let uv_path = resolve(base, &entry.uv_image);
    let pm = read_grid(&pm_path)?;
    let uv = read_grid(&uv_path)?;
    let points = pm
        .to_pixels::<3>()
        .ok_or_else(|| Error::format(&pm_path, format!("point map needs 3 channels, has {}", pm.channels)))?;
    let coords = uv
        .to_pixels::<2>()
        .ok_or_else(|| Error::format(&uv_path, format!("UV image needs 2 channels, has {}", uv.channels)))?;
    if (pm.height, pm.width) != (uv.height, uv.width) {
        return Err(Error::format(
            &uv_path,
            format!("UV image is {}x{} but the point map is {}x{}", uv.height, uv.width, pm.height, pm.width),
        ));
    }
    let camera = entry.camera.to_camera()?;
    ViewPrediction::new(pm.width, pm.height, points, coords, camera.intrinsics, camera.pose)
}

/// Reads the manifest and, in parallel, every view it lists.
pub fn load_scene(manifest_path: &Path) -> Result<LoadedScene> {
    let manifest = SceneManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let views = manifest
        .views
        .par_iter()
        .map(|v| load_view(base, v))
        .collect::<Result<Vec<_>>>()?;
    let template = read_template_obj(&resolve(base, &manifest.template))?;
    let landmarks = manifest
        .landmarks
        .as_ref()
        .map(|p| read_landmarks(&resolve(base, p)))
        .transpose()?;
    Ok(LoadedScene {
        views,
        template,
        landmarks,
    })
}

pub fn cameras_json(cameras: &[Camera]) -> String {
    let entries: Vec<CameraEntry> = cameras.iter().map(CameraEntry::from_camera).collect();
    serde_json::to_string_pretty(&entries).expect("cameras serialize")
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<CameraEntry> = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    entries
        .iter()
        .map(|e| e.to_camera().map_err(|err| Error::format(path, err.to_string())))
        .collect()
}
