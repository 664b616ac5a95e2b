use nalgebra::{Matrix3, SVD};
use serde::{Deserialize, Serialize};

use crate::geometry::Mesh;
use crate::{Error, Mat3, Result, Vec3};

pub const LANDMARK_COUNT: usize = 6;

/// `x -> scale * R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub scale: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    pub fn apply_mesh(&self, mesh: &Mesh) -> Mesh {
        mesh.transformed(|p| self.apply(p))
    }
}

/// Six corresponding 3D points, not all collinear.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: [Vec3; LANDMARK_COUNT],
}

impl LandmarkSet {
    pub fn new(points: &[Vec3]) -> Result<Self> {
        let points: [Vec3; LANDMARK_COUNT] = points.try_into().map_err(|_| {
            Error::DegenerateLandmarks(format!("expected {LANDMARK_COUNT} landmarks, got {}", points.len()))
        })?;
        check_spread(&points)?;
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }
}

/// Landmarks as given in a file: explicit coordinates or vertex indices into
/// the mesh they annotate.
#[derive(Clone, Debug, PartialEq)]
pub enum LandmarkSource {
    Points(Vec<Vec3>),
    Vertices(Vec<usize>),
}

impl LandmarkSource {
    pub fn resolve(&self, mesh: &Mesh) -> Result<LandmarkSet> {
        match self {
            LandmarkSource::Points(p) => LandmarkSet::new(p),
            LandmarkSource::Vertices(idx) => {
                let pts = idx
                    .iter()
                    .map(|&i| {
                        mesh.positions.get(i).copied().ok_or_else(|| {
                            Error::InvalidInput(format!(
                                "landmark vertex {i} out of range for a mesh with {} vertices",
                                mesh.positions.len()
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                LandmarkSet::new(&pts)
            }
        }
    }
}

fn centered(points: &[Vec3]) -> (Vec3, Vec<Vec3>) {
    let mean = points.iter().sum::<Vec3>() / points.len() as f64;
    (mean, points.iter().map(|p| p - mean).collect())
}

/// Rejects point sets whose centered scatter has rank below two.
fn check_spread(points: &[Vec3]) -> Result<()> {
    let (_, c) = centered(points);
    let scatter: Mat3 = c.iter().map(|p| p * p.transpose()).sum();
    let mut ev: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::DegenerateLandmarks("points are coincident or collinear".into()));
    }
    Ok(())
}

/// Least-squares similarity (or rigid, without scale) taking `source` onto
/// `target`, in Umeyama's closed form. The rotation is always proper.
pub fn umeyama(source: &[Vec3], target: &[Vec3], with_scale: bool) -> Result<Similarity> {
    if source.len() != target.len() {
        return Err(Error::SizeMismatch {
            expected: source.len(),
            actual: target.len(),
        });
    }
    if source.len() < 3 {
        return Err(Error::DegenerateLandmarks(format!("need at least 3 points, got {}", source.len())));
    }
    check_spread(source)?;
    check_spread(target)?;
    let n = source.len() as f64;
    let (mu_s, cs) = centered(source);
    let (mu_t, ct) = centered(target);
    let cov: Mat3 = ct.iter().zip(&cs).map(|(t, s)| t * s.transpose()).sum::<Mat3>() / n;
    let var_s = cs.iter().map(|s| s.norm_squared()).sum::<f64>() / n;

    let svd = SVD::new(cov, true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v requested");
    let mut d = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let scale = if with_scale {
        (svd.singular_values[0] * d[(0, 0)] + svd.singular_values[1] * d[(1, 1)] + svd.singular_values[2] * d[(2, 2)])
            / var_s
    } else {
        1.0
    };
    Ok(Similarity {
        rotation,
        translation: mu_t - rotation * mu_s * scale,
        scale,
    })
}

pub fn rigid_align(source: &LandmarkSet, target: &LandmarkSet, with_scale: bool) -> Result<Similarity> {
    umeyama(source.points(), target.points(), with_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::camera::rotation_from_axis_angle;

    fn landmarks() -> Vec<Vec3> {
        vec![
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(-0.3, 0.3, 0.8),
            Vec3::new(0.3, 0.3, 0.8),
            Vec3::new(-0.25, -0.3, 0.85),
            Vec3::new(0.25, -0.3, 0.85),
            Vec3::new(0.0, -0.6, 0.7),
        ]
    }

    #[test]
    fn identical_sets_give_identity() {
        let s = umeyama(&landmarks(), &landmarks(), true).unwrap();
        assert!((s.rotation - Mat3::identity()).amax() < 1e-12);
        assert!(s.translation.norm() < 1e-12);
        assert!((s.scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recovers_known_rigid_transform() {
        let r = rotation_from_axis_angle(&(Vec3::z() * 30f64.to_radians()));
        let t = Vec3::new(1.0, 2.0, 3.0);
        let target: Vec<Vec3> = landmarks().iter().map(|p| r * p + t).collect();
        let s = rigid_align(
            &LandmarkSet::new(&landmarks()).unwrap(),
            &LandmarkSet::new(&target).unwrap(),
            false,
        )
        .unwrap();
        assert!((s.rotation - r).amax() < 1e-9);
        assert!((s.translation - t).amax() < 1e-9);
        assert_eq!(s.scale, 1.0);
    }

    #[test]
    fn recovers_scale() {
        let target: Vec<Vec3> = landmarks().iter().map(|p| p * 2.5 + Vec3::x()).collect();
        let s = umeyama(&landmarks(), &target, true).unwrap();
        assert!((s.scale - 2.5).abs() < 1e-12);
    }

    #[test]
    fn reflection_yields_proper_rotation() {
        let target: Vec<Vec3> = landmarks().iter().map(|p| Vec3::new(-p.x, p.y, p.z)).collect();
        let s = umeyama(&landmarks(), &target, false).unwrap();
        assert!((s.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_landmarks_are_rejected() {
        let line: Vec<Vec3> = (0..6).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(LandmarkSet::new(&line), Err(Error::DegenerateLandmarks(_))));
        assert!(LandmarkSet::new(&landmarks()[..5]).is_err());
    }

    #[test]
    fn vertex_landmarks_resolve_against_mesh() {
        let mesh = Mesh::new(landmarks(), vec![[0, 1, 2], [3, 4, 5]]).unwrap();
        let set = LandmarkSource::Vertices(vec![5, 4, 3, 2, 1, 0]).resolve(&mesh).unwrap();
        assert_eq!(set.points()[0], landmarks()[5]);
        assert!(LandmarkSource::Vertices(vec![0, 1, 2, 3, 4, 9]).resolve(&mesh).is_err());
    }

    #[test]
    fn alignment_never_increases_landmark_error() {
        let r = rotation_from_axis_angle(&Vec3::new(0.2, -0.4, 0.1));
        let target: Vec<Vec3> = landmarks()
            .iter()
            .enumerate()
            .map(|(i, p)| r * p + Vec3::new(0.5, 0.0, -0.2) + Vec3::repeat(0.01 * i as f64))
            .collect();
        let before: f64 = landmarks().iter().zip(&target).map(|(a, b)| (a - b).norm_squared()).sum();
        let s = umeyama(&landmarks(), &target, false).unwrap();
        let after: f64 = landmarks().iter().zip(&target).map(|(a, b)| (s.apply(a) - b).norm_squared()).sum();
        assert!(after <= before);
    }
}
