//! Synthetic scenes with complete ground truth: a face-like surface, a ring of
//! cameras, rasterized point maps and UV images with controllable noise, and
//! the exact tracks.
//!
//! Point maps hold the surface point seen through each pixel center. UV
//! images are rasterized from the template's UV layout over vertex screen
//! positions jittered by the track noise, so looking a vertex's UV up in the
//! image lands near its jittered projection.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::correspondence::{compute_visibility, lookup_with_index, TrackSet, UvIndex};
use crate::geometry::{Camera, CameraIntrinsics, CameraPose, Mesh, TemplateMesh, ViewPrediction};
use crate::morphable::LinearShapeModel;
use crate::{Error, Result, Vec2, Vec3};

const MAX_ATTEMPTS: u64 = 5;
/// Percentile used when choosing which view keeps an occluded vertex.
const OCCLUSION_PERCENTILE: f64 = 70.0;

#[derive(Clone, Debug)]
pub enum TemplateSource {
    /// Spherical cap of a subdivided icosahedron facing +Z, with a face-like
    /// relief applied to the ground truth.
    Icosphere { subdivisions: usize, cap_degrees: f64 },
    /// A loaded template; its positions are the ground-truth surface.
    Mesh(TemplateMesh),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NoiseSpec {
    /// Screen-space jitter of each vertex in each UV image, in pixels.
    pub track_sigma_px: f64,
    /// Per-channel point-map noise in world units.
    pub point_sigma: f64,
    /// Rotation error of the initial cameras, in degrees.
    pub rotation_sigma_deg: f64,
    /// Per-channel additive UV noise.
    pub uv_sigma: f64,
}

#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub template: TemplateSource,
    pub n_views: usize,
    /// Square images of this many pixels per side.
    pub image_size: usize,
    pub radius: f64,
    pub azimuth_span_deg: f64,
    pub elevation_jitter_deg: f64,
    pub target: Vec3,
    /// Multiplier on the face relief (icosphere templates only).
    pub relief: f64,
    pub noise: NoiseSpec,
    /// Fraction of vertices left with at most one visible view.
    pub occlusion_fraction: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            template: TemplateSource::Icosphere {
                subdivisions: 5,
                cap_degrees: 60.0,
            },
            n_views: 16,
            image_size: 518,
            radius: 3.0,
            azimuth_span_deg: 80.0,
            elevation_jitter_deg: 10.0,
            target: Vec3::zeros(),
            relief: 1.0,
            noise: NoiseSpec::default(),
            occlusion_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.n_views < 2 {
            return bad(format!("need at least 2 views, got {}", self.n_views));
        }
        if self.image_size < 8 {
            return bad(format!("image size {} is too small", self.image_size));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return bad(format!("camera radius must be positive, got {}", self.radius));
        }
        let n = &self.noise;
        for (name, v) in [
            ("track sigma", n.track_sigma_px),
            ("point sigma", n.point_sigma),
            ("rotation sigma", n.rotation_sigma_deg),
            ("uv sigma", n.uv_sigma),
            ("elevation jitter", self.elevation_jitter_deg),
            ("relief", self.relief),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.occlusion_fraction) {
            return bad(format!("occlusion fraction must lie in [0, 1), got {}", self.occlusion_fraction));
        }
        if let TemplateSource::Icosphere { subdivisions, cap_degrees } = self.template {
            if subdivisions > 8 {
                return bad(format!("{subdivisions} subdivisions is too many"));
            }
            if !(cap_degrees > 0.0 && cap_degrees <= 90.0) {
                return bad(format!("cap angle must lie in (0, 90], got {cap_degrees}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub template: TemplateMesh,
    pub ground_truth: Mesh,
    /// True cameras.
    pub cameras: Vec<Camera>,
    /// Views carrying the perturbed initial cameras.
    pub views: Vec<ViewPrediction>,
    /// Exact projections with ground-truth visibility.
    pub tracks: TrackSet,
    pub occluded: Vec<usize>,
    pub landmarks: Vec<usize>,
}

impl Scene {
    pub fn initial_cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera()).collect()
    }

    /// Half a pixel back-projected at the mean depth of the visible vertices.
    pub fn half_pixel_bound(&self) -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for (i, cam) in self.cameras.iter().enumerate() {
            for (j, p) in self.ground_truth.positions.iter().enumerate() {
                if self.tracks.is_visible(i, j) {
                    sum += cam.pose.transform(p).z / cam.intrinsics.fx.min(cam.intrinsics.fy);
                    n += 1;
                }
            }
        }
        0.5 * sum / n.max(1) as f64
    }
}

/// Unit icosphere: the icosahedron with each face split into four
/// `subdivisions` times, faces wound counter-clockwise seen from outside.
pub fn icosphere(subdivisions: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut positions: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, positions: &mut Vec<Vec3>| {
            *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                positions.push(((positions[a] + positions[b]) * 0.5).normalize());
                positions.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut positions);
            let bc = mid(b, c, &mut positions);
            let ca = mid(c, a, &mut positions);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (positions, faces)
}

/// Vertices of the unit icosphere within `cap_degrees` of +Z, with UV from an
/// orthographic projection along Z scaled into `[0.05, 0.95]^2`.
pub fn icosphere_cap(subdivisions: usize, cap_degrees: f64) -> Result<TemplateMesh> {
    let (positions, faces) = icosphere(subdivisions);
    let min_z = cap_degrees.to_radians().cos() - 1e-12;
    let kept: Vec<[usize; 3]> = faces
        .into_iter()
        .filter(|f| f.iter().all(|&v| positions[v].z >= min_z))
        .collect();
    let mut remap = vec![usize::MAX; positions.len()];
    let mut cap = Vec::new();
    for f in &kept {
        for &v in f {
            if remap[v] == usize::MAX {
                remap[v] = cap.len();
                cap.push(positions[v]);
            }
        }
    }
    if cap.is_empty() {
        return Err(Error::Generation(format!("a {cap_degrees} degree cap holds no complete face")));
    }
    let faces: Vec<[usize; 3]> = kept.iter().map(|f| f.map(|v| remap[v])).collect();
    let extent = cap.iter().map(|p| p.x.abs().max(p.y.abs())).fold(0.0, f64::max);
    let uv = cap
        .iter()
        .map(|p| {
            Vec2::new(
                0.5 + 0.45 * p.x / extent,
                0.5 - 0.45 * p.y / extent,
            )
        })
        .collect();
    TemplateMesh::new(cap, uv, faces)
}

/// Gaussian bumps along the radial direction: nose, brows, eye sockets,
/// cheeks, mouth and chin. Amplitudes are fractions of the radius.
const RELIEF: [(f64, f64, f64, f64); 10] = [
    (0.0, -0.02, 0.18, 0.11),
    (0.0, 0.12, 0.05, 0.08),
    (-0.28, 0.30, 0.05, 0.10),
    (0.28, 0.30, 0.05, 0.10),
    (-0.30, 0.16, -0.07, 0.08),
    (0.30, 0.16, -0.07, 0.08),
    (-0.45, -0.20, 0.04, 0.15),
    (0.45, -0.20, 0.04, 0.15),
    (0.0, -0.38, -0.03, 0.08),
    (0.0, -0.62, 0.07, 0.13),
];

fn direction(x: f64, y: f64) -> Vec3 {
    Vec3::new(x, y, (1.0 - x * x - y * y).max(0.0).sqrt())
}

pub fn face_relief(positions: &[Vec3], amplitude: f64) -> Vec<Vec3> {
    positions
        .iter()
        .map(|p| {
            let n = p.normalize();
            let h: f64 = RELIEF
                .iter()
                .map(|&(x, y, a, w)| a * (-(n - direction(x, y)).norm_squared() / (2.0 * w * w)).exp())
                .sum();
            n * (p.norm() * (1.0 + amplitude * h))
        })
        .collect()
}

/// Six vertices nearest to the eye corners, nose, mouth corners and chin
/// directions.
pub fn landmark_vertices(positions: &[Vec3]) -> Vec<usize> {
    [(-0.3, 0.2), (0.3, 0.2), (0.0, 0.0), (-0.2, -0.4), (0.2, -0.4), (0.0, -0.65)]
        .iter()
        .map(|&(x, y)| {
            let d = direction(x, y);
            positions
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.normalize().dot(&d).total_cmp(&b.normalize().dot(&d)))
                .map_or(0, |(j, _)| j)
        })
        .collect()
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        if v.norm() > 1e-9 {
            return v.normalize();
        }
    }
}

/// Composes each rotation with a random rotation of angle `|N(0, sigma)|`
/// degrees about a uniform axis, and moves each translation by the same
/// angle times its length in a uniform direction.
pub fn perturb_cameras(cameras: &[Camera], sigma_deg: f64, seed: u64) -> Vec<Camera> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cameras
        .iter()
        .map(|cam| {
            let angle = (rng.sample::<f64, _>(StandardNormal) * sigma_deg).abs().to_radians();
            let axis = random_unit(&mut rng);
            let shift = random_unit(&mut rng) * (cam.pose.translation().norm() * angle);
            if angle == 0.0 {
                return *cam;
            }
            Camera {
                intrinsics: cam.intrinsics,
                pose: cam.pose.retract(&(axis * angle), &shift),
            }
        })
        .collect()
}

/// A linear model over the template: the template positions as mean and
/// `n_components` orthonormalized radial Gaussian bumps, each scaled by
/// `scale` so unit coefficients are typical.
pub fn linear_model(template: &TemplateMesh, n_components: usize, scale: f64, seed: u64) -> Result<LinearShapeModel> {
    let mean = template.positions().to_vec();
    let n = mean.len();
    if n == 0 {
        return Err(Error::Generation("template has no positions".into()));
    }
    if n_components > n {
        return Err(Error::Generation(format!("{n_components} components exceed {n} vertices")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = sample(&mut rng, n, n_components).into_vec();
    let centroid = mean.iter().sum::<Vec3>() / n as f64;
    let normals: Vec<Vec3> = mean
        .iter()
        .map(|p| (p - centroid).try_normalize(1e-12).unwrap_or_else(Vec3::z))
        .collect();
    let widths: Vec<f64> = (0..n_components).map(|_| rng.random_range(0.15..0.5)).collect();
    let raw = DMatrix::from_fn(3 * n, n_components, |r, k| {
        let j = r / 3;
        let d2 = (mean[j] - mean[centers[k]]).norm_squared();
        normals[j][r % 3] * (-d2 / (2.0 * widths[k] * widths[k])).exp()
    });
    // Remove the first-order similarity motions of the mean so that pose and
    // shape stay separable in a fit.
    let gauge = DMatrix::from_fn(3 * n, 7, |r, c| {
        let (j, a) = (r / 3, r % 3);
        let p = mean[j] - centroid;
        match c {
            0..=2 => f64::from(u8::from(a == c)),
            3..=5 => Vec3::ith(c - 3, 1.0).cross(&p)[a],
            _ => p[a],
        }
    });
    let g = gauge.qr().q();
    let free = &raw - &g * (g.transpose() * &raw);
    let q = free.qr().q();
    LinearShapeModel::new(mean, q * scale)
}

/// Per-pixel coverage from a z-buffered rasterization.
struct Raster {
    width: usize,
    depth: Vec<f64>,
    face: Vec<u32>,
    bary: Vec<[f64; 3]>,
}

const NO_FACE: u32 = u32::MAX;

/// Rasterizes front-facing triangles at pixel centers with perspective-correct
/// barycentrics. `screen` and `depth` are per vertex.
fn rasterize(size: usize, screen: &[Vec2], depth: &[f64], faces: &[[usize; 3]], front: &[bool]) -> Raster {
    let n = size * size;
    let mut r = Raster {
        width: size,
        depth: vec![f64::INFINITY; n],
        face: vec![NO_FACE; n],
        bary: vec![[0.0; 3]; n],
    };
    for (f, &[a, b, c]) in faces.iter().enumerate() {
        if !front[f] || !(depth[a] > 0.0 && depth[b] > 0.0 && depth[c] > 0.0) {
            continue;
        }
        let (pa, pb, pc) = (screen[a], screen[b], screen[c]);
        let area = (pb.x - pa.x) * (pc.y - pa.y) - (pc.x - pa.x) * (pb.y - pa.y);
        if area.abs() < 1e-12 {
            continue;
        }
        let lo = pa.inf(&pb).inf(&pc);
        let hi = pa.sup(&pb).sup(&pc);
        let c0 = lo.x.ceil().max(0.0) as usize;
        let r0 = lo.y.ceil().max(0.0) as usize;
        let c1 = hi.x.floor().min(size as f64 - 1.0);
        let r1 = hi.y.floor().min(size as f64 - 1.0);
        if c1 < 0.0 || r1 < 0.0 {
            continue;
        }
        for row in r0..=r1 as usize {
            for col in c0..=c1 as usize {
                let p = Vec2::new(col as f64, row as f64);
                let l0 = ((pb.x - p.x) * (pc.y - p.y) - (pc.x - p.x) * (pb.y - p.y)) / area;
                let l1 = ((pc.x - p.x) * (pa.y - p.y) - (pa.x - p.x) * (pc.y - p.y)) / area;
                let l2 = 1.0 - l0 - l1;
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                let w = [l0 / depth[a], l1 / depth[b], l2 / depth[c]];
                let inv = w[0] + w[1] + w[2];
                let z = 1.0 / inv;
                let idx = row * size + col;
                if z < r.depth[idx] {
                    r.depth[idx] = z;
                    r.face[idx] = f as u32;
                    r.bary[idx] = [w[0] * z, w[1] * z, w[2] * z];
                }
            }
        }
    }
    r
}

/// Everything rendered for one view before occlusion is applied.
struct RenderedView {
    point_map: Vec<[f32; 3]>,
    uv_image: Vec<[f32; 2]>,
    /// Vertex with the largest barycentric weight at each UV pixel.
    dominant: Vec<u32>,
    /// Ground-truth visibility without occlusion, and exact projections.
    visible: Vec<bool>,
    projections: Vec<Vec2>,
}

fn render_view(
    camera: &Camera,
    truth: &Mesh,
    normals: &[Vec3],
    uv: &[Vec2],
    size: usize,
    noise: &NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> RenderedView {
    let center = camera.pose.center();
    let n = truth.positions.len();
    let cam_points: Vec<Vec3> = truth.positions.iter().map(|p| camera.pose.transform(p)).collect();
    let depth: Vec<f64> = cam_points.iter().map(|p| p.z).collect();
    let k = &camera.intrinsics;
    let screen: Vec<Vec2> = cam_points
        .iter()
        .map(|p| Vec2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
        .collect();
    let front: Vec<bool> = (0..truth.faces.len())
        .map(|f| {
            let [a, b, c] = truth.triangle(f);
            (b - a).cross(&(c - a)).dot(&(center - (a + b + c) / 3.0)) > 0.0
        })
        .collect();

    let geometry = rasterize(size, &screen, &depth, &truth.faces, &front);
    let point_noise = Normal::new(0.0, noise.point_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let point_map: Vec<[f32; 3]> = (0..size * size)
        .map(|idx| {
            let f = geometry.face[idx];
            if f == NO_FACE {
                return [f32::NAN; 3];
            }
            let [a, b, c] = truth.faces[f as usize];
            let w = geometry.bary[idx];
            let mut p = truth.positions[a] * w[0] + truth.positions[b] * w[1] + truth.positions[c] * w[2];
            if noise.point_sigma > 0.0 {
                p += Vec3::from_fn(|_, _| point_noise.sample(rng));
            }
            [p.x as f32, p.y as f32, p.z as f32]
        })
        .collect();

    let jittered: Vec<Vec2> = if noise.track_sigma_px > 0.0 {
        let jitter = Normal::new(0.0, noise.track_sigma_px).expect("valid sigma");
        screen
            .iter()
            .map(|s| s + Vec2::new(jitter.sample(rng), jitter.sample(rng)))
            .collect()
    } else {
        screen.clone()
    };
    let uv_raster = rasterize(size, &jittered, &depth, &truth.faces, &front);
    let uv_noise = Normal::new(0.0, noise.uv_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut dominant = vec![NO_FACE; size * size];
    let uv_image: Vec<[f32; 2]> = (0..size * size)
        .map(|idx| {
            let f = uv_raster.face[idx];
            if f == NO_FACE {
                return [f32::NAN; 2];
            }
            let tri = truth.faces[f as usize];
            let w = uv_raster.bary[idx];
            let arg = (0..3).max_by(|&x, &y| w[x].total_cmp(&w[y])).unwrap_or(0);
            dominant[idx] = tri[arg] as u32;
            let mut c = uv[tri[0]] * w[0] + uv[tri[1]] * w[1] + uv[tri[2]] * w[2];
            if noise.uv_sigma > 0.0 {
                c += Vec2::new(uv_noise.sample(rng), uv_noise.sample(rng));
            }
            [c.x.clamp(0.0, 1.0) as f32, c.y.clamp(0.0, 1.0) as f32]
        })
        .collect();

    let visible = (0..n)
        .map(|j| {
            let s = screen[j];
            let p = truth.positions[j];
            if !(depth[j] > 0.0) || normals[j].dot(&(center - p)) <= 0.0 {
                return false;
            }
            let (col, row) = (s.x.round(), s.y.round());
            if col < 0.0 || row < 0.0 || col >= size as f64 || row >= size as f64 {
                return false;
            }
            let zbuf = geometry.depth[row as usize * geometry.width + col as usize];
            zbuf.is_finite() && depth[j] <= zbuf * (1.0 + 1e-2)
        })
        .collect();
    RenderedView {
        point_map,
        uv_image,
        dominant,
        visible,
        projections: screen,
    }
}

fn view_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn ring_cameras(spec: &SceneSpec, truth: &Mesh, rng: &mut ChaCha8Rng) -> Result<Vec<Camera>> {
    let bound = truth
        .positions
        .iter()
        .map(|p| (p - spec.target).norm())
        .fold(0.0, f64::max);
    let half_angle = (bound / spec.radius).min(0.95).asin();
    let focal = 0.9 * (spec.image_size as f64 / 2.0) / half_angle.tan();
    let principal = (spec.image_size as f64 - 1.0) / 2.0;
    let intrinsics = CameraIntrinsics::new(focal, focal, principal, principal)?;
    (0..spec.n_views)
        .map(|i| {
            let frac = if spec.n_views > 1 { i as f64 / (spec.n_views - 1) as f64 } else { 0.5 };
            let az = ((frac - 0.5) * spec.azimuth_span_deg).to_radians();
            let el = (rng.random_range(-1.0..=1.0) * spec.elevation_jitter_deg).to_radians();
            let eye = spec.target + Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * spec.radius;
            Ok(Camera {
                intrinsics,
                pose: CameraPose::look_at(eye, spec.target, Vec3::y())?,
            })
        })
        .collect()
}

/// Renders a scene. Deterministic in `spec.seed`: every view draws from its
/// own stream of the seeded generator.
pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (template, truth_positions) = match &spec.template {
        TemplateSource::Icosphere { subdivisions, cap_degrees } => {
            let t = icosphere_cap(*subdivisions, *cap_degrees)?;
            let gt = face_relief(t.positions(), spec.relief);
            (t, gt)
        }
        TemplateSource::Mesh(t) => {
            if t.positions().is_empty() {
                return Err(Error::Generation("template mesh has no positions".into()));
            }
            (t.clone(), t.positions().to_vec())
        }
    };
    let truth = Mesh::new(truth_positions, template.faces().to_vec())?;
    let normals = truth.vertex_normals();
    let n = template.len();

    for attempt in 0..MAX_ATTEMPTS {
        let seed = spec.seed.wrapping_add(attempt);
        let mut rng = view_rng(seed, 0);
        let cameras = ring_cameras(spec, &truth, &mut rng)?;
        let rendered: Vec<RenderedView> = cameras
            .par_iter()
            .enumerate()
            .map(|(i, cam)| {
                let mut vr = view_rng(seed, i as u64 + 1);
                render_view(cam, &truth, &normals, template.uv(), spec.image_size, &spec.noise, &mut vr)
            })
            .collect();
        if let Some(i) = rendered.iter().position(|r| !r.visible.iter().any(|&v| v)) {
            log::warn!("attempt {attempt}: view {i} sees no vertex, regenerating");
            continue;
        }
        let occluded = {
            let count = (spec.occlusion_fraction * n as f64).ceil() as usize;
            let mut idx = sample(&mut rng, n, count.min(n)).into_vec();
            idx.sort_unstable();
            idx
        };
        let kept = keeper_views(&rendered, &template, &occluded, spec.image_size);

        let mut is_occluded = vec![None; n];
        for (&j, &k) in occluded.iter().zip(&kept) {
            is_occluded[j] = Some(k);
        }
        let mut tracks = TrackSet::new(spec.n_views, n);
        let mut views = Vec::with_capacity(spec.n_views);
        let initial = {
            let mut cams = cameras.clone();
            let perturbed = perturb_cameras(&cameras[1..], spec.noise.rotation_sigma_deg, seed.wrapping_add(0x9e37));
            cams[1..].copy_from_slice(&perturbed);
            cams
        };
        for (i, r) in rendered.into_iter().enumerate() {
            let mut uv_image = r.uv_image;
            for (idx, &d) in r.dominant.iter().enumerate() {
                if d == NO_FACE {
                    continue;
                }
                if let Some(keep) = is_occluded[d as usize] {
                    if keep != Some(i) {
                        uv_image[idx] = [f32::NAN; 2];
                    }
                }
            }
            for j in 0..n {
                let hidden = matches!(is_occluded[j], Some(keep) if keep != Some(i));
                tracks.set(i, j, r.projections[j], r.visible[j] && !hidden, 0.0);
            }
            views.push(ViewPrediction::new(
                spec.image_size,
                spec.image_size,
                r.point_map,
                uv_image,
                initial[i].intrinsics,
                initial[i].pose,
            )?);
        }
        let landmarks = landmark_vertices(template.positions());
        return Ok(Scene {
            template,
            ground_truth: truth,
            cameras,
            views,
            tracks,
            occluded,
            landmarks,
        });
    }
    Err(Error::Generation(format!(
        "a camera saw no vertex in each of {MAX_ATTEMPTS} attempts"
    )))
}

/// For each occluded vertex, the view where its UV lookup is most clearly
/// below that view's visibility threshold, if any.
fn keeper_views(rendered: &[RenderedView], template: &TemplateMesh, occluded: &[usize], size: usize) -> Vec<Option<usize>> {
    if occluded.is_empty() {
        return Vec::new();
    }
    let ratios: Vec<Vec<f64>> = rendered
        .par_iter()
        .map(|r| {
            let Ok(index) = UvIndex::build(&r.uv_image, 1) else {
                return vec![f64::INFINITY; occluded.len()];
            };
            let hits = lookup_with_index(&index, size, template);
            let dist: Vec<f64> = hits.iter().map(|h| h.1).collect();
            let (eps, vis) = compute_visibility(&dist, OCCLUSION_PERCENTILE);
            occluded
                .iter()
                .map(|&j| match eps {
                    Some(e) if vis[j] && r.visible[j] && e > 0.0 => dist[j] / e,
                    _ => f64::INFINITY,
                })
                .collect()
        })
        .collect();
    (0..occluded.len())
        .map(|k| {
            (0..rendered.len())
                .filter(|&i| ratios[i][k].is_finite())
                .min_by(|&a, &b| ratios[a][k].total_cmp(&ratios[b][k]))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::{build_tracks, CorrespondenceConfig};
    use crate::fusion::fuse_initial;
    use crate::geometry::camera::rotation_angle_between;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            template: TemplateSource::Icosphere {
                subdivisions: 3,
                cap_degrees: 60.0,
            },
            n_views: 6,
            image_size: 160,
            ..Default::default()
        }
    }

    #[test]
    fn icosphere_counts_and_valence() {
        let (p, f) = icosphere(2);
        assert_eq!(p.len(), 162);
        assert_eq!(f.len(), 320);
        let mesh = Mesh::new(p.clone(), f.clone()).unwrap();
        for (j, n) in mesh.vertex_normals().iter().enumerate() {
            assert!(n.dot(&p[j]) > 0.9, "faces must wind outward");
        }
    }

    #[test]
    fn cap_template_has_unique_uv_and_expected_size() {
        let t = icosphere_cap(5, 60.0).unwrap();
        assert!((2400..2700).contains(&t.len()), "{}", t.len());
        let inside = |v: f64| (0.05 - 1e-6..=0.95 + 1e-6).contains(&v);
        assert!(t.uv().iter().all(|c| inside(c.x) && inside(c.y)));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SceneSpec {
            noise: NoiseSpec {
                track_sigma_px: 1.0,
                point_sigma: 0.01,
                rotation_sigma_deg: 0.5,
                uv_sigma: 0.002,
            },
            occlusion_fraction: 0.1,
            ..small_spec()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        for (va, vb) in a.views.iter().zip(&b.views) {
            let bits = |v: &ViewPrediction| {
                v.point_map()
                    .iter()
                    .flat_map(|p| p.map(f32::to_bits))
                    .chain(v.uv_image().iter().flat_map(|c| c.map(f32::to_bits)))
                    .collect::<Vec<_>>()
            };
            assert_eq!(bits(va), bits(vb));
            assert_eq!(va.pose, vb.pose);
        }
        assert_eq!(a.tracks, b.tracks);
        let c = generate(&SceneSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.tracks, c.tracks);
    }

    #[test]
    fn occluded_vertices_have_at_most_one_view() {
        let spec = SceneSpec {
            occlusion_fraction: 0.1,
            ..small_spec()
        };
        let s = generate(&spec).unwrap();
        let weak = (0..s.template.len()).filter(|&j| s.tracks.track_count(j) < 2).count();
        assert!(weak as f64 >= 0.1 * s.template.len() as f64);
        assert!(s.occluded.iter().all(|&j| s.tracks.track_count(j) <= 1));
    }

    #[test]
    fn noiseless_lookup_and_fusion_recover_vertices() {
        let s = generate(&small_spec()).unwrap();
        let mut tracks = build_tracks(&s.views, &s.template, &CorrespondenceConfig::default()).unwrap();
        let fx = s.cameras[0].intrinsics.fx;
        let mut errs = Vec::new();
        for i in 0..s.views.len() {
            for j in 0..s.template.len() {
                if tracks.is_visible(i, j) {
                    errs.push((tracks.track(i, j) - s.tracks.track(i, j)).norm());
                }
            }
        }
        errs.sort_by(f64::total_cmp);
        // Silhouette vertices sit on compressed UV and may miss by more.
        assert!(errs[errs.len() / 2] <= 0.5, "median {}", errs[errs.len() / 2]);
        assert!(errs[errs.len() * 95 / 100] <= 1.0, "p95 {}", errs[errs.len() * 95 / 100]);
        let cloud = fuse_initial(&s.views, &mut tracks).unwrap();
        for (j, p) in cloud.points.iter().enumerate() {
            if cloud.constrained[j] {
                let depth = s.cameras[0].pose.transform(&s.ground_truth.positions[j]).z;
                // One pixel of quantization at this depth, on a sloped surface.
                assert!((p - s.ground_truth.positions[j]).norm() < 3.0 * depth / fx, "vertex {j}");
            }
        }
    }

    #[test]
    fn perturbation_magnitude_follows_half_normal() {
        let cams: Vec<Camera> = (0..1000)
            .map(|_| Camera {
                intrinsics: CameraIntrinsics::new(500.0, 500.0, 0.0, 0.0).unwrap(),
                pose: CameraPose::from_axis_angle(Vec3::new(0.1, 0.2, 0.3), Vec3::new(0.0, 0.0, 3.0)),
            })
            .collect();
        assert_eq!(perturb_cameras(&cams[..3], 0.0, 1), cams[..3].to_vec());
        let out = perturb_cameras(&cams, 0.5, 2);
        let mean = out
            .iter()
            .zip(&cams)
            .map(|(a, b)| rotation_angle_between(a.pose.rotation(), b.pose.rotation()).to_degrees())
            .sum::<f64>()
            / 1000.0;
        let expect = 0.5 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean - expect).abs() < 0.03, "{mean} vs {expect}");
    }

    #[test]
    fn linear_model_has_full_rank() {
        let t = icosphere_cap(3, 60.0).unwrap();
        let m = linear_model(&t, 12, 0.05, 3).unwrap();
        assert_eq!(m.n_components(), 12);
    }

    #[test]
    fn landmarks_are_distinct() {
        let t = icosphere_cap(4, 60.0).unwrap();
        let mut l = landmark_vertices(t.positions());
        l.sort_unstable();
        l.dedup();
        assert_eq!(l.len(), 6);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate(&SceneSpec { n_views: 1, ..small_spec() }).is_err());
        assert!(generate(&SceneSpec { occlusion_fraction: 1.0, ..small_spec() }).is_err());
        let mut spec = small_spec();
        spec.noise.track_sigma_px = -1.0;
        assert!(generate(&spec).is_err());
    }
}
