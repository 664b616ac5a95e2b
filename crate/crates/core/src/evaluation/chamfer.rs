use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::align::umeyama;
use super::bvh::{closest_point_on_triangle, Bvh};
use crate::geometry::Mesh;
use crate::{Error, Result, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChamferConfig {
    /// Surface samples drawn from each sampled mesh.
    pub samples: usize,
    pub seed: u64,
    /// Also measure reference-to-prediction and pool both directions.
    pub symmetric: bool,
    /// Multiplier applied to every distance, e.g. 1000 for meters to millimeters.
    pub unit_scale: f64,
}

impl Default for ChamferConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            seed: 0,
            symmetric: false,
            unit_scale: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Mean, median (average of the middle pair for even counts) and population
/// standard deviation. `None` for an empty slice.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[m]
    } else {
        0.5 * (sorted[m - 1] + sorted[m])
    };
    Some(Summary {
        mean,
        median,
        std: var.sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChamferReport {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub samples: usize,
    pub symmetric: bool,
    /// Distance from each predicted vertex to the reference surface, for
    /// error maps.
    pub per_vertex: Vec<f64>,
}

fn check_mesh(mesh: &Mesh, what: &str) -> Result<f64> {
    if mesh.is_empty() {
        return Err(Error::InvalidMesh(format!("{what} mesh is empty")));
    }
    let area: f64 = (0..mesh.faces.len()).map(|f| mesh.face_area(f)).sum();
    if !(area > 0.0 && area.is_finite()) {
        return Err(Error::InvalidMesh(format!("{what} mesh has no surface area")));
    }
    Ok(area)
}

/// `n` points distributed uniformly by area over the mesh surface.
pub fn sample_surface(mesh: &Mesh, n: usize, seed: u64) -> Result<Vec<Vec3>> {
    check_mesh(mesh, "sampled")?;
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let target = rng.random::<f64>() * total;
            let f = cumulative.partition_point(|&c| c <= target).min(mesh.faces.len() - 1);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            let [a, b, c] = mesh.triangle(f);
            a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2)
        })
        .collect())
}

fn distances_to(points: &[Vec3], bvh: &Bvh) -> Vec<f64> {
    points
        .par_iter()
        .map(|p| bvh.closest_point(p).map_or(f64::INFINITY, |c| c.distance_squared.sqrt()))
        .collect()
}

/// Exhaustive closest-triangle scan; the reference for the hierarchy.
pub fn brute_force_distances(points: &[Vec3], mesh: &Mesh) -> Vec<f64> {
    let tris: Vec<[Vec3; 3]> = (0..mesh.faces.len()).map(|f| mesh.triangle(f)).collect();
    points
        .par_iter()
        .map(|p| {
            tris.iter()
                .map(|[a, b, c]| closest_point_on_triangle(p, a, b, c).1)
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Point-to-surface distances from area samples of `predicted` to
/// `reference`, both already in a common frame.
pub fn chamfer_stats(predicted: &Mesh, reference: &Mesh, config: &ChamferConfig) -> Result<ChamferReport> {
    check_mesh(predicted, "predicted")?;
    check_mesh(reference, "reference")?;
    if config.samples == 0 {
        return Err(Error::InvalidInput("chamfer needs at least one sample".into()));
    }
    if !(config.unit_scale > 0.0 && config.unit_scale.is_finite()) {
        return Err(Error::InvalidInput(format!("unit scale must be positive, got {}", config.unit_scale)));
    }
    let ref_bvh = Bvh::build(reference);
    let samples = sample_surface(predicted, config.samples, config.seed)?;
    let mut distances = distances_to(&samples, &ref_bvh);
    if config.symmetric {
        let pred_bvh = Bvh::build(predicted);
        let back = sample_surface(reference, config.samples, config.seed.wrapping_add(1))?;
        distances.extend(distances_to(&back, &pred_bvh));
    }
    let scale = config.unit_scale;
    distances.iter_mut().for_each(|d| *d *= scale);
    let s = summarize(&distances).expect("samples > 0");
    let per_vertex = distances_to(&predicted.positions, &ref_bvh).into_iter().map(|d| d * scale).collect();
    Ok(ChamferReport {
        mean: s.mean,
        median: s.median,
        std: s.std,
        samples: distances.len(),
        symmetric: config.symmetric,
        per_vertex,
    })
}

/// Euclidean distance between corresponding vertices.
pub fn vertex_errors(a: &[Vec3], b: &[Vec3]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::SizeMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(p, q)| (p - q).norm()).collect())
}

/// Per-vertex error after the least-squares similarity taking `predicted`
/// onto `truth`, fitted on the vertices where `mask` is set (all when
/// `None`).
pub fn aligned_vertex_errors(predicted: &[Vec3], truth: &[Vec3], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if predicted.len() != truth.len() {
        return Err(Error::SizeMismatch {
            expected: truth.len(),
            actual: predicted.len(),
        });
    }
    let (src, dst): (Vec<Vec3>, Vec<Vec3>) = predicted
        .iter()
        .zip(truth)
        .enumerate()
        .filter(|(j, _)| mask.is_none_or(|m| m[*j]))
        .map(|(_, (p, t))| (*p, *t))
        .unzip();
    let sim = umeyama(&src, &dst, true)?;
    Ok(predicted.iter().zip(truth).map(|(p, t)| (sim.apply(p) - t).norm()).collect())
}
