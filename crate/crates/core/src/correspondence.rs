//! UV-image lookup: for every template vertex and view, the pixel whose
//! predicted UV is closest to the vertex's UV, and a per-view visibility test
//! that keeps only the closest matches.

use rayon::prelude::*;

use crate::geometry::{TemplateMesh, ViewPrediction};
use crate::{Error, Result, Vec2};

#[derive(Clone, Debug)]
pub struct CorrespondenceConfig {
    /// Visibility percentile in (0, 100].
    pub percentile: f64,
    /// Views with fewer finite UV pixels are treated as seeing nothing.
    pub min_valid_pixels: usize,
}

impl Default for CorrespondenceConfig {
    fn default() -> Self {
        Self {
            percentile: 70.0,
            min_valid_pixels: 16,
        }
    }
}

impl CorrespondenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(Error::InvalidInput(format!(
                "percentile must lie in (0, 100], got {}",
                self.percentile
            )));
        }
        Ok(())
    }
}

/// Exact nearest-neighbor index over the UV values of valid pixels.
///
/// Pixels are bucketed on a uniform grid over the unit square; queries search
/// rings of cells outward until no unvisited cell can hold a closer (or
/// equally close, lower-index) pixel. Ties resolve to the lowest row-major
/// pixel index.
#[derive(Clone, Debug)]
pub struct UvIndex {
    cells_per_side: usize,
    cell_size: f64,
    /// Bucket start offsets into `entries`, length `cells^2 + 1`.
    offsets: Vec<u32>,
    /// (pixel index, u, v), each bucket in ascending pixel order.
    entries: Vec<(u32, f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nearest {
    pub pixel: usize,
    pub distance: f64,
}

impl UvIndex {
    /// Builds the index over all pixels with finite UV.
    pub fn build(uv_image: &[[f32; 2]], min_valid_pixels: usize) -> Result<Self> {
        let valid: Vec<(u32, f64, f64)> = uv_image
            .iter()
            .enumerate()
            .filter(|(_, c)| c[0].is_finite() && c[1].is_finite())
            .map(|(i, c)| (i as u32, c[0] as f64, c[1] as f64))
            .collect();
        if valid.is_empty() || valid.len() < min_valid_pixels {
            return Err(Error::TooFewValidPixels {
                found: valid.len(),
                required: min_valid_pixels.max(1),
            });
        }
        // About two points per cell.
        let cells = ((valid.len() as f64 / 2.0).sqrt().ceil() as usize).clamp(1, 4096);
        let cell_size = 1.0 / cells as f64;
        let cell_of = |u: f64, v: f64| {
            let cx = ((u / cell_size) as usize).min(cells - 1);
            let cy = ((v / cell_size) as usize).min(cells - 1);
            cy * cells + cx
        };
        let mut counts = vec![0u32; cells * cells + 1];
        for &(_, u, v) in &valid {
            counts[cell_of(u, v) + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let offsets = counts.clone();
        let mut cursor = counts;
        let mut entries = vec![(0u32, 0.0, 0.0); valid.len()];
        for e in valid {
            let c = cell_of(e.1, e.2);
            entries[cursor[c] as usize] = e;
            cursor[c] += 1;
        }
        Ok(Self {
            cells_per_side: cells,
            cell_size,
            offsets,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn nearest(&self, query: Vec2) -> Nearest {
        let cells = self.cells_per_side as isize;
        let qx = ((query.x / self.cell_size).floor() as isize).clamp(0, cells - 1);
        let qy = ((query.y / self.cell_size).floor() as isize).clamp(0, cells - 1);
        // Distance from the query to the boundary of its own (clamped) cell
        // block; any cell in ring r lies at least (r - 1) * size + slack away.
        let slack = {
            let x0 = qx as f64 * self.cell_size;
            let y0 = qy as f64 * self.cell_size;
            let dx = (query.x - x0).min(x0 + self.cell_size - query.x);
            let dy = (query.y - y0).min(y0 + self.cell_size - query.y);
            dx.min(dy).max(0.0)
        };
        let mut best_d2 = f64::INFINITY;
        let mut best_idx = u32::MAX;
        let max_ring = cells;
        for ring in 0..=max_ring {
            if ring > 0 && best_d2.is_finite() {
                let bound = (ring - 1) as f64 * self.cell_size + slack;
                if bound * bound > best_d2 {
                    break;
                }
            }
            for (cx, cy) in ring_cells(qx, qy, ring, cells) {
                let c = (cy * cells + cx) as usize;
                let (lo, hi) = (self.offsets[c] as usize, self.offsets[c + 1] as usize);
                for &(idx, u, v) in &self.entries[lo..hi] {
                    let du = u - query.x;
                    let dv = v - query.y;
                    let d2 = du * du + dv * dv;
                    if d2 < best_d2 || (d2 == best_d2 && idx < best_idx) {
                        best_d2 = d2;
                        best_idx = idx;
                    }
                }
            }
        }
        Nearest {
            pixel: best_idx as usize,
            distance: best_d2.sqrt(),
        }
    }
}

/// Cells at Chebyshev distance exactly `ring` from `(qx, qy)`, clipped to the grid.
fn ring_cells(qx: isize, qy: isize, ring: isize, cells: isize) -> impl Iterator<Item = (isize, isize)> {
    let (x0, x1) = (qx - ring, qx + ring);
    let (y0, y1) = (qy - ring, qy + ring);
    (y0..=y1)
        .flat_map(move |y| {
            let xs: Box<dyn Iterator<Item = isize>> = if y == y0 || y == y1 {
                Box::new(x0..=x1)
            } else if ring == 0 {
                Box::new(std::iter::once(x0))
            } else {
                Box::new([x0, x1].into_iter())
            };
            xs.map(move |x| (x, y))
        })
        .filter(move |&(x, y)| x >= 0 && y >= 0 && x < cells && y < cells)
}

/// Exhaustive scan with the same distance arithmetic and tie rule as [`UvIndex`].
pub fn nearest_linear_scan(uv_image: &[[f32; 2]], query: Vec2) -> Option<Nearest> {
    let mut best: Option<(f64, usize)> = None;
    for (i, c) in uv_image.iter().enumerate() {
        if !(c[0].is_finite() && c[1].is_finite()) {
            continue;
        }
        let du = c[0] as f64 - query.x;
        let dv = c[1] as f64 - query.y;
        let d2 = du * du + dv * dv;
        if best.is_none_or(|(b, _)| d2 < b) {
            best = Some((d2, i));
        }
    }
    best.map(|(d2, pixel)| Nearest {
        pixel,
        distance: d2.sqrt(),
    })
}

/// Tracks, visibility flags and match distances for every (view, vertex) pair,
/// stored view-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackSet {
    n_views: usize,
    n_vertices: usize,
    tracks: Vec<Vec2>,
    visibility: Vec<bool>,
    nearest_distance: Vec<f64>,
    thresholds: Vec<Option<f64>>,
}

impl TrackSet {
    pub fn new(n_views: usize, n_vertices: usize) -> Self {
        let n = n_views * n_vertices;
        Self {
            n_views,
            n_vertices,
            tracks: vec![Vec2::zeros(); n],
            visibility: vec![false; n],
            nearest_distance: vec![f64::INFINITY; n],
            thresholds: vec![None; n_views],
        }
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    fn at(&self, view: usize, vertex: usize) -> usize {
        view * self.n_vertices + vertex
    }

    pub fn track(&self, view: usize, vertex: usize) -> Vec2 {
        self.tracks[self.at(view, vertex)]
    }

    pub fn is_visible(&self, view: usize, vertex: usize) -> bool {
        self.visibility[self.at(view, vertex)]
    }

    pub fn nearest_distance(&self, view: usize, vertex: usize) -> f64 {
        self.nearest_distance[self.at(view, vertex)]
    }

    /// Visibility threshold used for a view, if it had any finite distances.
    pub fn threshold(&self, view: usize) -> Option<f64> {
        self.thresholds[view]
    }

    pub fn set(&mut self, view: usize, vertex: usize, track: Vec2, visible: bool, distance: f64) {
        let i = self.at(view, vertex);
        self.tracks[i] = track;
        self.visibility[i] = visible;
        self.nearest_distance[i] = distance;
    }

    pub fn set_visible(&mut self, view: usize, vertex: usize, visible: bool) {
        let i = self.at(view, vertex);
        self.visibility[i] = visible;
    }

    pub fn track_count(&self, vertex: usize) -> usize {
        (0..self.n_views).filter(|&i| self.is_visible(i, vertex)).count()
    }

    pub fn track_counts(&self) -> Vec<usize> {
        (0..self.n_vertices).map(|j| self.track_count(j)).collect()
    }

    pub fn total_visible(&self) -> usize {
        self.visibility.iter().filter(|&&v| v).count()
    }

    pub fn visible_in_view(&self, view: usize) -> usize {
        let s = view * self.n_vertices;
        self.visibility[s..s + self.n_vertices].iter().filter(|&&v| v).count()
    }

    fn set_view(&mut self, view: usize, row: ViewTracks) {
        let s = view * self.n_vertices;
        self.tracks[s..s + self.n_vertices].copy_from_slice(&row.tracks);
        self.visibility[s..s + self.n_vertices].copy_from_slice(&row.visibility);
        self.nearest_distance[s..s + self.n_vertices].copy_from_slice(&row.distances);
        self.thresholds[view] = row.threshold;
    }
}

#[derive(Clone, Debug)]
struct ViewTracks {
    tracks: Vec<Vec2>,
    visibility: Vec<bool>,
    distances: Vec<f64>,
    threshold: Option<f64>,
}

/// Nearest pixel for every template vertex. A view whose UV image cannot be
/// indexed yields `+inf` distances everywhere.
pub fn lookup_tracks(view: &ViewPrediction, template: &TemplateMesh, min_valid_pixels: usize) -> Vec<(Vec2, f64)> {
    let index = match UvIndex::build(view.uv_image(), min_valid_pixels) {
        Ok(index) => index,
        Err(_) => return vec![(Vec2::zeros(), f64::INFINITY); template.len()],
    };
    lookup_with_index(&index, view.width(), template)
}

pub fn lookup_with_index(index: &UvIndex, width: usize, template: &TemplateMesh) -> Vec<(Vec2, f64)> {
    template
        .uv()
        .iter()
        .map(|c| {
            let hit = index.nearest(*c);
            let col = hit.pixel % width;
            let row = hit.pixel / width;
            (Vec2::new(col as f64, row as f64), hit.distance)
        })
        .collect()
}

/// Nearest-rank percentile of the finite values: the `ceil(p/100 * n)`-th
/// smallest. `None` when there are no finite values.
pub fn nearest_rank_percentile(values: &[f64], percentile: f64) -> Option<f64> {
    let mut finite: Vec<f64> = values.iter().copied().filter(|d| d.is_finite()).collect();
    if finite.is_empty() {
        return None;
    }
    finite.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0) * finite.len() as f64).ceil() as usize;
    Some(finite[rank.clamp(1, finite.len()) - 1])
}

/// Per-view threshold and strict visibility test `distance < threshold`.
pub fn compute_visibility(distances: &[f64], percentile: f64) -> (Option<f64>, Vec<bool>) {
    match nearest_rank_percentile(distances, percentile) {
        Some(eps) => (Some(eps), distances.iter().map(|&d| d < eps).collect()),
        None => (None, vec![false; distances.len()]),
    }
}

/// Lookup and visibility for all views, one view per worker.
pub fn build_tracks(views: &[ViewPrediction], template: &TemplateMesh, config: &CorrespondenceConfig) -> Result<TrackSet> {
    config.validate()?;
    let rows: Vec<ViewTracks> = views
        .par_iter()
        .map(|view| {
            let hits = lookup_tracks(view, template, config.min_valid_pixels);
            let distances: Vec<f64> = hits.iter().map(|h| h.1).collect();
            let (threshold, visibility) = compute_visibility(&distances, config.percentile);
            ViewTracks {
                tracks: hits.into_iter().map(|h| h.0).collect(),
                visibility,
                distances,
                threshold,
            }
        })
        .collect();
    let mut set = TrackSet::new(views.len(), template.len());
    for (i, row) in rows.into_iter().enumerate() {
        set.set_view(i, row);
    }
    Ok(set)
}
