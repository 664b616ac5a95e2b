use std::collections::HashSet;

use crate::{Error, Result, Vec2, Vec3};

/// A triangle mesh: positions plus a face list.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub positions: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(positions: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        check_faces(&faces, positions.len())?;
        Ok(Self { positions, faces })
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty() || self.faces.is_empty()
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.positions[a], self.positions[b], self.positions[c]]
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Area-weighted, normalized vertex normals. Vertices without incident area
    /// get a zero normal.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut normals = vec![Vec3::zeros(); self.positions.len()];
        for &[a, b, c] in &self.faces {
            let n = (self.positions[b] - self.positions[a])
                .cross(&(self.positions[c] - self.positions[a]));
            normals[a] += n;
            normals[b] += n;
            normals[c] += n;
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            }
        }
        normals
    }

    pub fn transformed(&self, f: impl Fn(&Vec3) -> Vec3) -> Mesh {
        Mesh {
            positions: self.positions.iter().map(f).collect(),
            faces: self.faces.clone(),
        }
    }
}

/// The fixed-connectivity template: per-vertex UV coordinates, triangles, and
/// the 1-ring neighborhoods derived from them.
#[derive(Clone, Debug)]
pub struct TemplateMesh {
    positions: Vec<Vec3>,
    uv: Vec<Vec2>,
    faces: Vec<[usize; 3]>,
    neighborhoods: Vec<Vec<usize>>,
}

impl TemplateMesh {
    /// Validates face indices, UV range and uniqueness, and rejects isolated
    /// vertices. `positions` may be empty when only topology is known.
    pub fn new(positions: Vec<Vec3>, uv: Vec<Vec2>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = uv.len();
        if n == 0 {
            return Err(Error::InvalidMesh("template has no vertices".into()));
        }
        if !positions.is_empty() && positions.len() != n {
            return Err(Error::SizeMismatch {
                expected: n,
                actual: positions.len(),
            });
        }
        for (j, c) in uv.iter().enumerate() {
            if !(c.x.is_finite() && c.y.is_finite()) || !(0.0..=1.0).contains(&c.x) || !(0.0..=1.0).contains(&c.y) {
                return Err(Error::InvalidMesh(format!("vertex {j} has UV {c:?} outside [0,1]^2")));
            }
        }
        let mut seen = HashSet::with_capacity(n);
        for (j, c) in uv.iter().enumerate() {
            if !seen.insert((c.x.to_bits(), c.y.to_bits())) {
                return Err(Error::InvalidMesh(format!("vertex {j} duplicates another vertex's UV {c:?}")));
            }
        }
        let neighborhoods = precompute_neighborhoods(&faces, n)?;
        if let Some(j) = neighborhoods.iter().position(|nb| nb.is_empty()) {
            return Err(Error::InvalidMesh(format!("vertex {j} is isolated")));
        }
        Ok(Self {
            positions,
            uv,
            faces,
            neighborhoods,
        })
    }

    pub fn len(&self) -> usize {
        self.uv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uv.is_empty()
    }

    pub fn uv(&self) -> &[Vec2] {
        &self.uv
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn neighborhoods(&self) -> &[Vec<usize>] {
        &self.neighborhoods
    }

    pub fn neighbors(&self, j: usize) -> &[usize] {
        &self.neighborhoods[j]
    }
}

pub(crate) fn check_faces(faces: &[[usize; 3]], n_vertices: usize) -> Result<()> {
    for (f, tri) in faces.iter().enumerate() {
        if let Some(&bad) = tri.iter().find(|&&v| v >= n_vertices) {
            return Err(Error::InvalidMesh(format!(
                "face {f} references vertex {bad}, but the mesh has {n_vertices} vertices"
            )));
        }
        if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
            return Err(Error::InvalidMesh(format!("face {f} is degenerate: {tri:?}")));
        }
    }
    Ok(())
}

/// Sorted, deduplicated 1-ring of every vertex. Isolated vertices get an empty
/// list; [`TemplateMesh::new`] rejects them.
pub fn precompute_neighborhoods(faces: &[[usize; 3]], n_vertices: usize) -> Result<Vec<Vec<usize>>> {
    check_faces(faces, n_vertices)?;
    let mut rings = vec![Vec::new(); n_vertices];
    for &[a, b, c] in faces {
        for (u, v) in [(a, b), (b, c), (c, a)] {
            rings[u].push(v);
            rings[v].push(u);
        }
    }
    for ring in &mut rings {
        ring.sort_unstable();
        ring.dedup();
    }
    Ok(rings)
}

/// Uniform Laplacian `p_j - mean(p_k for k in N(j))`.
pub fn laplacian_vector(points: &[Vec3], j: usize, neighborhoods: &[Vec<usize>]) -> Vec3 {
    let ring = &neighborhoods[j];
    debug_assert!(!ring.is_empty());
    let sum: Vec3 = ring.iter().map(|&k| points[k]).sum();
    points[j] - sum / ring.len() as f64
}
