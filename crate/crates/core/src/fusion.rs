//! Visibility-weighted averaging of per-view point-map samples into one
//! initial point per template vertex.

use rayon::prelude::*;

use crate::correspondence::TrackSet;
use crate::geometry::{Mesh, TemplateMesh, ViewPrediction};
use crate::{Error, Result, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct TopologizedCloud {
    pub points: Vec<Vec3>,
    /// `track_counts[j] > 0`.
    pub constrained: Vec<bool>,
    pub track_counts: Vec<usize>,
}

impl TopologizedCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Averages `X_i[q_ij]` over the views where vertex `j` is visible. Visible
/// tracks landing on a non-finite point-map entry are demoted to invisible in
/// `tracks`. Vertices with no remaining track sit at the origin.
pub fn fuse_initial(views: &[ViewPrediction], tracks: &mut TrackSet) -> Result<TopologizedCloud> {
    if views.len() != tracks.n_views() {
        return Err(Error::SizeMismatch {
            expected: tracks.n_views(),
            actual: views.len(),
        });
    }
    let n = tracks.n_vertices();
    let fused: Vec<(Vec3, usize, Vec<usize>)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut sum = Vec3::zeros();
            let mut count = 0;
            let mut demoted = Vec::new();
            for (i, view) in views.iter().enumerate() {
                if !tracks.is_visible(i, j) {
                    continue;
                }
                let q = tracks.track(i, j);
                let (col, row) = (q.x as usize, q.y as usize);
                let sample = (col < view.width() && row < view.height())
                    .then(|| view.point(col, row))
                    .flatten();
                match sample {
                    Some(p) => {
                        sum += p;
                        count += 1;
                    }
                    None => demoted.push(i),
                }
            }
            let p = if count > 0 { sum / count as f64 } else { Vec3::zeros() };
            (p, count, demoted)
        })
        .collect();

    let mut points = Vec::with_capacity(n);
    let mut track_counts = Vec::with_capacity(n);
    for (j, (p, count, demoted)) in fused.into_iter().enumerate() {
        for i in demoted {
            tracks.set_visible(i, j, false);
        }
        points.push(p);
        track_counts.push(count);
    }
    Ok(TopologizedCloud {
        constrained: track_counts.iter().map(|&c| c > 0).collect(),
        points,
        track_counts,
    })
}

/// Attaches the template's faces to the cloud's positions.
pub fn connect_mesh(points: &[Vec3], template: &TemplateMesh) -> Result<Mesh> {
    if points.len() != template.len() {
        return Err(Error::SizeMismatch {
            expected: template.len(),
            actual: points.len(),
        });
    }
    Mesh::new(points.to_vec(), template.faces().to_vec())
}
