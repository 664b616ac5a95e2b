use nalgebra::{DMatrix, DVector, SMatrix};
use rayon::prelude::*;

use super::SolverConfig;
use crate::correspondence::TrackSet;
use crate::fusion::TopologizedCloud;
use crate::geometry::camera::skew;
use crate::geometry::{laplacian_vector, Camera, TemplateMesh, ViewPrediction};
use crate::{Error, Result, Vec2, Vec3};

/// Residual assigned to each component of an observation whose point lies
/// behind its camera.
pub const BEHIND_CAMERA_RESIDUAL: f64 = 1e6;

/// Camera parameters in local order: rotation increment (3), translation (3),
/// then fx, fy, cx, cy.
const CAMERA_LOCAL: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub camera: usize,
    pub point: usize,
    pub measured: Vec2,
}

#[derive(Clone, Debug)]
pub struct ResidualSystem {
    observations: Vec<Observation>,
    neighborhoods: Vec<Vec<usize>>,
    n_cameras: usize,
    lambda: f64,
    huber_delta: Option<f64>,
    freeze_first_camera: bool,
    freeze_intrinsics: bool,
}

/// Cameras and points being optimized.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub cameras: Vec<Camera>,
    pub points: Vec<Vec3>,
}

impl State {
    pub fn from_views(views: &[ViewPrediction], points: Vec<Vec3>) -> Self {
        Self {
            cameras: views.iter().map(|v| v.camera()).collect(),
            points,
        }
    }

    /// Applies an update vector laid out by `layout`.
    pub fn retract(&self, layout: &ParameterLayout, delta: &[f64]) -> State {
        assert_eq!(delta.len(), layout.n_params());
        let cameras = self
            .cameras
            .iter()
            .enumerate()
            .map(|(i, cam)| {
                let mut cam = *cam;
                let mut local = [0.0; CAMERA_LOCAL];
                for (local_k, col) in layout.camera_columns(i) {
                    local[local_k] = delta[col];
                }
                if layout.is_pose_free(i) {
                    let d_rot = Vec3::new(local[0], local[1], local[2]);
                    let d_t = Vec3::new(local[3], local[4], local[5]);
                    cam.pose = cam.pose.retract(&d_rot, &d_t);
                }
                if layout.active[i].iter().any(|&k| k >= 6) {
                    cam.intrinsics.fx += local[6];
                    cam.intrinsics.fy += local[7];
                    cam.intrinsics.cx += local[8];
                    cam.intrinsics.cy += local[9];
                }
                cam
            })
            .collect();
        let base = layout.n_camera_params;
        let points = self
            .points
            .iter()
            .enumerate()
            .map(|(j, p)| p + Vec3::new(delta[base + 3 * j], delta[base + 3 * j + 1], delta[base + 3 * j + 2]))
            .collect();
        State { cameras, points }
    }
}

/// Which residual families take part in an objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Terms {
    pub reprojection: bool,
    pub laplacian: bool,
}

impl Terms {
    pub const ALL: Terms = Terms {
        reprojection: true,
        laplacian: true,
    };
    pub const REPROJECTION: Terms = Terms {
        reprojection: true,
        laplacian: false,
    };
}

/// Column layout of the active parameters: camera blocks first, then three
/// columns per point.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterLayout {
    /// Active local camera parameters, in column order.
    pub(crate) active: Vec<Vec<usize>>,
    /// Start and width of each camera's contiguous block.
    pub(crate) camera_block: Vec<(usize, usize)>,
    pub(crate) n_camera_params: usize,
    pub(crate) n_points: usize,
}

impl ParameterLayout {
    pub fn new(system: &ResidualSystem, n_points: usize, cameras_free: bool) -> Self {
        let active = (0..system.n_cameras)
            .map(|i| {
                let pose_free = cameras_free && !(system.freeze_first_camera && i == 0);
                let intr_free = cameras_free && !system.freeze_intrinsics;
                (0..CAMERA_LOCAL)
                    .filter(|&k| if k < 6 { pose_free } else { intr_free })
                    .collect()
            })
            .collect();
        let mut layout = Self {
            active,
            camera_block: Vec::new(),
            n_camera_params: 0,
            n_points,
        };
        layout.assign_columns();
        layout
    }

    fn assign_columns(&mut self) {
        let mut offset = 0;
        self.camera_block = self
            .active
            .iter()
            .map(|a| {
                let block = (offset, a.len());
                offset += a.len();
                block
            })
            .collect();
        self.n_camera_params = offset;
    }

    /// Holds one local parameter of a camera fixed.
    pub fn freeze(&mut self, camera: usize, local: usize) {
        self.active[camera].retain(|&k| k != local);
        self.assign_columns();
    }

    pub fn n_params(&self) -> usize {
        self.n_camera_params + 3 * self.n_points
    }

    pub fn n_camera_params(&self) -> usize {
        self.n_camera_params
    }

    pub fn point_column(&self, j: usize) -> usize {
        self.n_camera_params + 3 * j
    }

    /// Whether any rotation or translation parameter of the camera is free.
    pub fn is_pose_free(&self, camera: usize) -> bool {
        self.active[camera].iter().any(|&k| k < 6)
    }

    /// `(local index, global column)` for each active parameter of a camera.
    pub(crate) fn camera_columns(&self, camera: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let start = self.camera_block[camera].0;
        self.active_local(camera).enumerate().map(move |(n, local)| (local, start + n))
    }

    /// Local camera parameter indices that are active, in column order.
    pub(crate) fn active_local(&self, camera: usize) -> impl Iterator<Item = usize> + '_ {
        self.active[camera].iter().copied()
    }
}

impl ResidualSystem {
    pub fn new(
        observations: Vec<Observation>,
        neighborhoods: Vec<Vec<usize>>,
        n_cameras: usize,
        config: &SolverConfig,
    ) -> Result<Self> {
        config.validate()?;
        if observations.is_empty() {
            return Err(Error::NoValidTracks);
        }
        let n = neighborhoods.len();
        if let Some(o) = observations.iter().find(|o| o.camera >= n_cameras || o.point >= n) {
            return Err(Error::InvalidInput(format!("observation {o:?} is out of range")));
        }
        if config.lambda > 0.0 && neighborhoods.iter().any(|r| r.is_empty()) {
            return Err(Error::InvalidMesh("Laplacian needs every vertex to have a neighbor".into()));
        }
        Ok(Self {
            observations,
            neighborhoods,
            n_cameras,
            lambda: config.lambda,
            huber_delta: config.huber_delta,
            freeze_first_camera: config.freeze_first_camera,
            freeze_intrinsics: config.freeze_intrinsics,
        })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn neighborhoods(&self) -> &[Vec<usize>] {
        &self.neighborhoods
    }

    pub fn n_cameras(&self) -> usize {
        self.n_cameras
    }

    pub fn n_points(&self) -> usize {
        self.neighborhoods.len()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn huber_delta(&self) -> Option<f64> {
        self.huber_delta
    }

    pub fn reprojection_block_count(&self) -> usize {
        self.observations.len()
    }

    pub fn laplacian_block_count(&self) -> usize {
        self.n_points()
    }

    /// Scalar residual count: two per observation plus three per vertex.
    pub fn residual_count(&self, terms: Terms) -> usize {
        let r = if terms.reprojection { 2 * self.observations.len() } else { 0 };
        let l = if terms.laplacian { 3 * self.n_points() } else { 0 };
        r + l
    }

    /// Layout with cameras free except those frozen by configuration.
    pub fn layout(&self) -> ParameterLayout {
        ParameterLayout::new(self, self.n_points(), true)
    }

    pub(crate) fn first_camera_frozen(&self) -> bool {
        self.freeze_first_camera
    }

    pub(crate) fn laplacian_active(&self, terms: Terms) -> bool {
        terms.laplacian && self.lambda > 0.0
    }

    /// Vertices with fewer than two observations.
    pub fn weakly_observed_vertices(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_points()];
        for o in &self.observations {
            counts[o.point] += 1;
        }
        counts.iter().enumerate().filter(|(_, &c)| c < 2).map(|(j, _)| j).collect()
    }
}

/// Enumerates one reprojection block per visible track and one Laplacian
/// block per template vertex.
pub fn build_system(
    views: &[ViewPrediction],
    tracks: &TrackSet,
    cloud: &TopologizedCloud,
    template: &TemplateMesh,
    config: &SolverConfig,
) -> Result<ResidualSystem> {
    if tracks.n_views() != views.len() {
        return Err(Error::SizeMismatch {
            expected: views.len(),
            actual: tracks.n_views(),
        });
    }
    if tracks.n_vertices() != template.len() || cloud.len() != template.len() {
        return Err(Error::SizeMismatch {
            expected: template.len(),
            actual: if cloud.len() != template.len() { cloud.len() } else { tracks.n_vertices() },
        });
    }
    let mut observations = Vec::with_capacity(tracks.total_visible());
    for i in 0..views.len() {
        for j in 0..template.len() {
            if tracks.is_visible(i, j) {
                observations.push(Observation {
                    camera: i,
                    point: j,
                    measured: tracks.track(i, j),
                });
            }
        }
    }
    ResidualSystem::new(observations, template.neighborhoods().to_vec(), views.len(), config)
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    /// `pi(...) - q` per observation (capped when behind the camera).
    pub reprojection: Vec<Vec2>,
    pub behind: Vec<bool>,
    /// `sqrt(lambda) * (p_j - mean N(j))` per vertex; empty when the term is off.
    pub laplacian: Vec<Vec3>,
    pub reprojection_cost: f64,
    pub laplacian_cost: f64,
    pub cost: f64,
    pub behind_camera: usize,
}

impl Evaluation {
    /// Residuals flattened: reprojection blocks then Laplacian blocks.
    pub fn residual_vector(&self) -> Vec<f64> {
        self.reprojection
            .iter()
            .flat_map(|r| [r.x, r.y])
            .chain(self.laplacian.iter().flat_map(|l| [l.x, l.y, l.z]))
            .collect()
    }

    /// RMS reprojection error in pixels over observations in front of their camera.
    pub fn rms_reprojection(&self) -> f64 {
        let (sum, n) = self
            .reprojection
            .iter()
            .zip(&self.behind)
            .filter(|(_, &b)| !b)
            .fold((0.0, 0usize), |(s, n), (r, _)| (s + r.norm_squared(), n + 1));
        if n == 0 {
            0.0
        } else {
            (sum / n as f64).sqrt()
        }
    }
}

/// Huber loss on a squared norm and its derivative.
pub(crate) fn huber(s: f64, delta: Option<f64>) -> (f64, f64) {
    match delta {
        Some(d) if s > d * d => {
            let r = s.sqrt();
            (2.0 * d * r - d * d, d / r)
        }
        _ => (s, 1.0),
    }
}

fn reprojection_residual(cam: &Camera, p: &Vec3, measured: &Vec2) -> (Vec2, bool) {
    match cam.project(p) {
        Ok(uv) => (uv - measured, false),
        Err(_) => (Vec2::repeat(BEHIND_CAMERA_RESIDUAL), true),
    }
}

/// Residuals and cost `0.5 * (sum rho(|r_ij|^2) + lambda * sum |l_j|^2)`.
pub fn evaluate(system: &ResidualSystem, state: &State, terms: Terms) -> Evaluation {
    let (reprojection, behind): (Vec<Vec2>, Vec<bool>) = if terms.reprojection {
        system
            .observations
            .par_iter()
            .map(|o| reprojection_residual(&state.cameras[o.camera], &state.points[o.point], &o.measured))
            .unzip()
    } else {
        (Vec::new(), Vec::new())
    };
    let laplacian: Vec<Vec3> = if terms.laplacian {
        let w = system.lambda.sqrt();
        (0..system.n_points())
            .into_par_iter()
            .map(|j| {
                if w == 0.0 {
                    Vec3::zeros()
                } else {
                    laplacian_vector(&state.points, j, &system.neighborhoods) * w
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let reprojection_cost = 0.5
        * reprojection
            .iter()
            .map(|r| huber(r.norm_squared(), system.huber_delta).0)
            .sum::<f64>();
    let laplacian_cost = 0.5 * laplacian.iter().map(|l| l.norm_squared()).sum::<f64>();
    let behind_camera = behind.iter().filter(|&&b| b).count();
    Evaluation {
        reprojection,
        behind,
        laplacian,
        reprojection_cost,
        laplacian_cost,
        cost: reprojection_cost + laplacian_cost,
        behind_camera,
    }
}

/// Partials of one reprojection residual with respect to the camera's local
/// parameters and the point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObservationJacobian {
    pub d_camera: SMatrix<f64, 2, CAMERA_LOCAL>,
    pub d_point: SMatrix<f64, 2, 3>,
}

impl ObservationJacobian {
    fn zero() -> Self {
        Self {
            d_camera: SMatrix::zeros(),
            d_point: SMatrix::zeros(),
        }
    }
}

fn observation_jacobian(cam: &Camera, p: &Vec3) -> ObservationJacobian {
    let pc = cam.pose.transform(p);
    if !(pc.z > 0.0) {
        return ObservationJacobian::zero();
    }
    let k = &cam.intrinsics;
    let iz = 1.0 / pc.z;
    let d_proj = SMatrix::<f64, 2, 3>::new(
        k.fx * iz,
        0.0,
        -k.fx * pc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * pc.y * iz * iz,
    );
    // x_cam = exp(w) R p + t  =>  d x_cam / d w = -[R p]_x at w = 0.
    let rp = pc - cam.pose.translation();
    let d_rot = d_proj * (-skew(&rp));
    let mut d_camera = SMatrix::<f64, 2, CAMERA_LOCAL>::zeros();
    d_camera.fixed_view_mut::<2, 3>(0, 0).copy_from(&d_rot);
    d_camera.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_proj);
    d_camera[(0, 6)] = pc.x * iz;
    d_camera[(1, 7)] = pc.y * iz;
    d_camera[(0, 8)] = 1.0;
    d_camera[(1, 9)] = 1.0;
    ObservationJacobian {
        d_camera,
        d_point: d_proj * cam.pose.rotation(),
    }
}

/// Sparse Jacobian: dense 2x10 / 2x3 pieces per observation, and the constant
/// Laplacian stencil.
#[derive(Clone, Debug)]
pub struct Jacobian {
    pub observations: Vec<ObservationJacobian>,
    pub layout: ParameterLayout,
    pub terms: Terms,
    sqrt_lambda: f64,
}

pub fn jacobian(system: &ResidualSystem, state: &State, layout: &ParameterLayout, terms: Terms) -> Jacobian {
    let observations = if terms.reprojection {
        system
            .observations
            .par_iter()
            .map(|o| observation_jacobian(&state.cameras[o.camera], &state.points[o.point]))
            .collect()
    } else {
        Vec::new()
    };
    Jacobian {
        observations,
        layout: layout.clone(),
        terms,
        sqrt_lambda: system.lambda.sqrt(),
    }
}

impl Jacobian {
    /// Nonzero entries `(row, col, value)` over the active columns.
    pub fn triplets(&self, system: &ResidualSystem) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (b, (o, jac)) in system.observations.iter().zip(&self.observations).enumerate() {
            let cam_cols: Vec<(usize, usize)> = self.camera_columns(o.camera).collect();
            for r in 0..2 {
                for &(local, col) in &cam_cols {
                    out.push((2 * b + r, col, jac.d_camera[(r, local)]));
                }
                let pc = self.layout.point_column(o.point);
                for c in 0..3 {
                    out.push((2 * b + r, pc + c, jac.d_point[(r, c)]));
                }
            }
        }
        if self.terms.laplacian {
            let base = if self.terms.reprojection { 2 * system.observations.len() } else { 0 };
            for (j, ring) in system.neighborhoods.iter().enumerate() {
                let w = self.sqrt_lambda;
                for a in 0..3 {
                    out.push((base + 3 * j + a, self.layout.point_column(j) + a, w));
                    for &k in ring {
                        out.push((base + 3 * j + a, self.layout.point_column(k) + a, -w / ring.len() as f64));
                    }
                }
            }
        }
        out
    }

    pub fn to_dense(&self, system: &ResidualSystem) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(system.residual_count(self.terms), self.layout.n_params());
        for (r, c, v) in self.triplets(system) {
            m[(r, c)] += v;
        }
        m
    }

    /// `(local index, global column)` for each active parameter of a camera.
    pub(crate) fn camera_columns(&self, camera: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layout.camera_columns(camera)
    }

    pub fn gradient(&self, system: &ResidualSystem, eval: &Evaluation) -> DVector<f64> {
        let r = DVector::from_vec(eval.residual_vector());
        let j = self.to_dense(system);
        j.transpose() * r
    }
}
