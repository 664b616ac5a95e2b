//! End-to-end reconstruction: correspondence, fusion, bundle adjustment and
//! meshing.

use log::info;

use crate::correspondence::{build_tracks, CorrespondenceConfig, TrackSet};
use crate::fusion::{connect_mesh, fuse_initial, TopologizedCloud};
use crate::geometry::{Camera, Mesh, TemplateMesh, ViewPrediction};
use crate::solver::{build_system, solve, SolveReport, SolverConfig, State};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct ReconstructOptions {
    pub correspondence: CorrespondenceConfig,
    pub solver: SolverConfig,
    /// When false the fused cloud is meshed as is, with the input cameras.
    pub bundle_adjust: bool,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        Self {
            correspondence: CorrespondenceConfig::default(),
            solver: SolverConfig::default(),
            bundle_adjust: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub mesh: Mesh,
    pub cameras: Vec<Camera>,
    pub tracks: TrackSet,
    /// The fused initialization.
    pub initial: TopologizedCloud,
    pub report: Option<SolveReport>,
}

pub fn reconstruct(views: &[ViewPrediction], template: &TemplateMesh, options: &ReconstructOptions) -> Result<Reconstruction> {
    if views.len() < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 views, got {}", views.len())));
    }
    let mut tracks = build_tracks(views, template, &options.correspondence)?;
    let initial = fuse_initial(views, &mut tracks)?;
    if tracks.total_visible() == 0 {
        return Err(Error::NoValidTracks);
    }
    info!(
        "{} tracks over {} views; {} of {} vertices seen at least once",
        tracks.total_visible(),
        views.len(),
        initial.constrained.iter().filter(|&&c| c).count(),
        template.len()
    );
    if !options.bundle_adjust {
        return Ok(Reconstruction {
            mesh: connect_mesh(&initial.points, template)?,
            cameras: views.iter().map(|v| v.camera()).collect(),
            tracks,
            initial,
            report: None,
        });
    }
    let system = build_system(views, &tracks, &initial, template, &options.solver)?;
    let start = State::from_views(views, initial.points.clone());
    let (state, report) = solve(&system, &start, &options.solver)?;
    info!(
        "bundle adjustment: {:?} after {} accepted steps, rms {:.4} -> {:.4} px",
        report.termination,
        report.accepted_steps(),
        report.initial_rms_px,
        report.final_rms_px
    );
    Ok(Reconstruction {
        mesh: connect_mesh(&state.points, template)?,
        cameras: state.cameras,
        tracks,
        initial,
        report: Some(report),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::aligned_vertex_errors;
    use crate::synth::{generate, SceneSpec, TemplateSource};

    fn spec() -> SceneSpec {
        SceneSpec {
            template: TemplateSource::Icosphere {
                subdivisions: 3,
                cap_degrees: 60.0,
            },
            n_views: 6,
            image_size: 200,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_scene_is_recovered() {
        let mut s = spec();
        s.noise.rotation_sigma_deg = 0.5;
        let scene = generate(&s).unwrap();
        let out = reconstruct(&scene.views, &scene.template, &ReconstructOptions::default()).unwrap();
        let report = out.report.unwrap();
        assert!(report.final_rms_px < report.initial_rms_px);
        assert!(report.final_rms_px < 1.0, "{}", report.final_rms_px);
        let mask: Vec<bool> = (0..scene.template.len()).map(|j| out.tracks.track_count(j) >= 2).collect();
        let mut err: Vec<f64> = aligned_vertex_errors(&out.mesh.positions, &scene.ground_truth.positions, Some(&mask))
            .unwrap()
            .into_iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(e, _)| e)
            .collect();
        err.sort_by(f64::total_cmp);
        let median = err[err.len() / 2];
        assert!(median <= scene.half_pixel_bound(), "{median} > {}", scene.half_pixel_bound());
    }

    #[test]
    fn skipping_bundle_adjustment_returns_the_fused_cloud() {
        let scene = generate(&spec()).unwrap();
        let options = ReconstructOptions {
            bundle_adjust: false,
            ..Default::default()
        };
        let out = reconstruct(&scene.views, &scene.template, &options).unwrap();
        assert!(out.report.is_none());
        assert_eq!(out.mesh.positions, out.initial.points);
    }

    #[test]
    fn single_view_is_rejected() {
        let scene = generate(&spec()).unwrap();
        assert!(reconstruct(&scene.views[..1], &scene.template, &ReconstructOptions::default()).is_err());
    }
}
