//! Pinhole cameras with world-to-camera extrinsics.
//!
//! Convention used throughout the crate: `x_cam = R * x_world + t`, the camera
//! looks along its +Z axis, image x grows to the right and image y grows down,
//! and a projected point lands at `(fx * X / Z + cx, fy * Y / Z + cy)` in pixel
//! units. Pixel `(col, row)` has its center at screen coordinate `(col, row)`.

use serde::{Deserialize, Serialize};

use crate::{Error, Mat3, Result, Vec2, Vec3};

/// Angles below this use the series expansion of Rodrigues' formula.
const SMALL_ANGLE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidInput("principal point must be finite".into()));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// World-to-camera rigid transform.
///
/// The rotation matrix is the stored representation; optimizers update it
/// through a left-multiplied axis-angle increment (see [`CameraPose::retract`]),
/// so a pose that is never updated keeps its exact bits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    rotation: Mat3,
    translation: Vec3,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a pose from a rotation matrix. Matrices within 1e-6 of SO(3) are
    /// accepted; those further than 1e-9 away are projected back onto SO(3).
    pub fn from_matrix(rotation: Mat3, translation: Vec3) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("camera pose has non-finite entries".into()));
        }
        let deviation = orthonormality_error(&rotation);
        if deviation > 1e-6 || rotation.determinant() <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "rotation is not a proper orthonormal matrix (deviation {deviation:.3e})"
            )));
        }
        let rotation = if deviation > 1e-9 {
            project_to_rotation(&rotation)
        } else {
            rotation
        };
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_axis_angle(axis_angle: Vec3, translation: Vec3) -> Self {
        Self {
            rotation: rotation_from_axis_angle(&axis_angle),
            translation,
        }
    }

    /// Camera at `eye` looking at `target`, with image y pointing away from `up`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() == 0.0 {
            return Err(Error::InvalidInput("look_at: eye equals target".into()));
        }
        let z = forward.normalize();
        let down = -(up - z * up.dot(&z));
        if down.norm() < 1e-12 {
            return Err(Error::InvalidInput("look_at: up is parallel to view direction".into()));
        }
        let y = down.normalize();
        let x = y.cross(&z);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(Self {
            rotation,
            translation: -(rotation * eye),
        })
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn axis_angle(&self) -> Vec3 {
        axis_angle_from_rotation(&self.rotation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn transform(&self, world: &Vec3) -> Vec3 {
        self.rotation * world + self.translation
    }

    /// Applies `R <- exp(d_rot) * R`, `t <- t + d_trans`.
    pub fn retract(&self, d_rot: &Vec3, d_trans: &Vec3) -> Self {
        Self {
            rotation: rotation_from_axis_angle(d_rot) * self.rotation,
            translation: self.translation + d_trans,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: first `other`, then `self`.
    pub fn compose(&self, other: &CameraPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl Camera {
    pub fn project(&self, point: &Vec3) -> Result<Vec2> {
        project(&self.intrinsics, &self.pose, point)
    }
}

pub fn project(intrinsics: &CameraIntrinsics, pose: &CameraPose, point: &Vec3) -> Result<Vec2> {
    let p = pose.transform(point);
    if !(p.z > 0.0) {
        return Err(Error::BehindCamera { depth: p.z });
    }
    Ok(Vec2::new(
        intrinsics.fx * p.x / p.z + intrinsics.cx,
        intrinsics.fy * p.y / p.z + intrinsics.cy,
    ))
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn rotation_from_axis_angle(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(w);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Mat3::identity() + k * a + k * k * b
}

pub fn axis_angle_from_rotation(r: &Mat3) -> Vec3 {
    let v = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin = 0.5 * v.norm();
    let cos = 0.5 * (r.trace() - 1.0);
    let theta = sin.atan2(cos);
    if theta < SMALL_ANGLE {
        return v * 0.5;
    }
    if cos > -0.9 {
        return v * (theta / (2.0 * sin));
    }
    // Near pi the antisymmetric part vanishes; take the axis from the
    // symmetric part (R + R^T) / 2 = cos I + (1 - cos) a a^T.
    let sym = (r + r.transpose()) * 0.5;
    let aat = (sym - Mat3::identity() * cos) / (1.0 - cos);
    let col = (0..3).max_by(|&a, &b| aat[(a, a)].total_cmp(&aat[(b, b)])).unwrap_or(0);
    let mut axis = aat.column(col).into_owned();
    axis /= axis.norm();
    if axis.dot(&v) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Geodesic angle between two rotations, in radians.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> f64 {
    axis_angle_from_rotation(&(a.transpose() * b)).norm()
}

pub fn orthonormality_error(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).abs().max()
}

/// Nearest rotation in the Frobenius sense.
pub fn project_to_rotation(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Mat3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    macro_rules! assert_close {
        ($a:expr, $b:expr, $tol:expr) => {{
            let (a, b): (f64, f64) = ($a, $b);
            assert!((a - b).abs() <= $tol, "{} vs {} (tol {})", a, b, $tol);
        }};
    }

    fn unit_k() -> CameraIntrinsics {
        CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap()
    }

    #[test]
    fn principal_axis_projects_to_principal_point() {
        let uv = project(&unit_k(), &CameraPose::identity(), &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(uv, Vec2::new(0.0, 0.0));
    }

    #[test]
    fn analytic_pinhole() {
        let k = CameraIntrinsics::new(500.0, 500.0, 259.0, 259.0).unwrap();
        let uv = project(&k, &CameraPose::identity(), &Vec3::new(0.1, 0.0, 1.0)).unwrap();
        assert_close!(uv.x, 309.0, 1e-12);
        assert_close!(uv.y, 259.0, 1e-12);
    }

    #[test]
    fn half_turn_about_y() {
        // R = diag(-1, 1, -1); R * (0,0,1) + (0,0,2) = (0,0,1).
        let pose = CameraPose::from_axis_angle(Vec3::new(0.0, PI, 0.0), Vec3::new(0.0, 0.0, 2.0));
        let expected_r = Mat3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!((pose.rotation() - expected_r).abs().max() < 1e-15);
        let uv = project(&unit_k(), &pose, &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_close!(uv.x, 0.0, 1e-15);
        assert_close!(uv.y, 0.0, 1e-15);
    }

    #[test]
    fn behind_camera_is_an_error() {
        let err = project(&unit_k(), &CameraPose::identity(), &Vec3::new(0.0, 0.0, -1.0));
        assert!(matches!(err, Err(Error::BehindCamera { .. })));
        let err = project(&unit_k(), &CameraPose::identity(), &Vec3::new(1.0, 0.0, 0.0));
        assert!(matches!(err, Err(Error::BehindCamera { .. })));
    }

    #[test]
    fn rodrigues_small_angle_branch_is_continuous() {
        let w = Vec3::new(3e-9, -2e-9, 1e-9);
        let series = rotation_from_axis_angle(&w);
        let first_order = Mat3::identity() + skew(&w);
        assert!((series - first_order).abs().max() < 1e-16);
        let w = Vec3::new(1.2e-8, 0.0, 0.0);
        let closed = rotation_from_axis_angle(&w);
        assert!(orthonormality_error(&closed) < 1e-15);
    }

    #[test]
    fn log_inverts_exp() {
        for w in [
            Vec3::new(0.3, -0.2, 0.9),
            Vec3::new(1e-10, 0.0, 0.0),
            Vec3::new(0.0, PI - 1e-9, 0.0),
            Vec3::new(1.0, 1.0, 1.0).normalize() * 3.0,
        ] {
            let r = rotation_from_axis_angle(&w);
            let back = axis_angle_from_rotation(&r);
            assert!((rotation_from_axis_angle(&back) - r).abs().max() < 1e-9, "{w:?}");
        }
    }

    #[test]
    fn retract_keeps_rotation_orthonormal() {
        let mut pose = CameraPose::identity();
        for i in 0..1000 {
            let d = Vec3::new(0.01 * (i as f64).sin(), 0.02, -0.015);
            pose = pose.retract(&d, &Vec3::zeros());
        }
        assert!(orthonormality_error(pose.rotation()) < 1e-9);
        assert!((pose.rotation().determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn look_at_points_the_optical_axis_at_the_target() {
        let eye = Vec3::new(1.0, 0.5, 3.0);
        let pose = CameraPose::look_at(eye, Vec3::zeros(), Vec3::y()).unwrap();
        let k = CameraIntrinsics::new(600.0, 600.0, 259.0, 259.0).unwrap();
        let uv = project(&k, &pose, &Vec3::zeros()).unwrap();
        assert_close!(uv.x, 259.0, 1e-9);
        assert_close!(uv.y, 259.0, 1e-9);
        assert!((pose.center() - eye).norm() < 1e-12);
        // World up maps to image up (negative y).
        let above = project(&k, &pose, &Vec3::new(0.0, 0.1, 0.0)).unwrap();
        assert!(above.y < 259.0);
    }

    #[test]
    fn from_matrix_rejects_reflections() {
        let m = Mat3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraPose::from_matrix(m, Vec3::zeros()).is_err());
    }

    #[test]
    fn from_matrix_keeps_exact_bits_of_clean_rotations() {
        let r = rotation_from_axis_angle(&Vec3::new(0.1, 0.2, 0.3));
        let pose = CameraPose::from_matrix(r, Vec3::new(1.0, 2.0, 3.0)).unwrap();
        assert_eq!(*pose.rotation(), r);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(CameraIntrinsics::new(1.0, f64::NAN, 0.0, 0.0).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, f64::INFINITY, 0.0).is_err());
    }
}
