use crate::geometry::camera::{Camera, CameraIntrinsics, CameraPose};
use crate::{Error, Result, Vec2, Vec3};

/// One input view: a pixel-aligned world-space point map, a UV-coordinate
/// image of the same size, and the camera estimate. Non-finite grid entries
/// mark invalid pixels.
#[derive(Clone, Debug)]
pub struct ViewPrediction {
    width: usize,
    height: usize,
    point_map: Vec<[f32; 3]>,
    uv_image: Vec<[f32; 2]>,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl ViewPrediction {
    pub fn new(
        width: usize,
        height: usize,
        point_map: Vec<[f32; 3]>,
        uv_image: Vec<[f32; 2]>,
        intrinsics: CameraIntrinsics,
        pose: CameraPose,
    ) -> Result<Self> {
        let n = width * height;
        if n == 0 {
            return Err(Error::InvalidInput("view has zero pixels".into()));
        }
        if point_map.len() != n {
            return Err(Error::SizeMismatch {
                expected: n,
                actual: point_map.len(),
            });
        }
        if uv_image.len() != n {
            return Err(Error::SizeMismatch {
                expected: n,
                actual: uv_image.len(),
            });
        }
        for (idx, uv) in uv_image.iter().enumerate() {
            let finite = uv[0].is_finite() && uv[1].is_finite();
            if finite && !uv.iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(Error::InvalidInput(format!(
                    "UV image pixel {idx} holds {uv:?}, outside [0,1]^2"
                )));
            }
        }
        intrinsics.validate()?;
        Ok(Self {
            width,
            height,
            point_map,
            uv_image,
            intrinsics,
            pose,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn camera(&self) -> Camera {
        Camera {
            intrinsics: self.intrinsics,
            pose: self.pose,
        }
    }

    pub fn point_map(&self) -> &[[f32; 3]] {
        &self.point_map
    }

    pub fn uv_image(&self) -> &[[f32; 2]] {
        &self.uv_image
    }

    /// Row-major pixel index.
    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    /// World point at a pixel, or `None` when any component is non-finite.
    pub fn point(&self, col: usize, row: usize) -> Option<Vec3> {
        let p = self.point_map[self.index(col, row)];
        p.iter()
            .all(|v| v.is_finite())
            .then(|| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64))
    }

    pub fn uv(&self, col: usize, row: usize) -> Option<Vec2> {
        let c = self.uv_image[self.index(col, row)];
        (c[0].is_finite() && c[1].is_finite()).then(|| Vec2::new(c[0] as f64, c[1] as f64))
    }

    /// Validity derived from the UV image.
    pub fn valid_mask(&self) -> Vec<bool> {
        self.uv_image
            .iter()
            .map(|c| c[0].is_finite() && c[1].is_finite())
            .collect()
    }

    pub fn with_pose(&self, pose: CameraPose) -> Self {
        Self { pose, ..self.clone() }
    }
}
