use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use topoface::correspondence::{build_tracks, CorrespondenceConfig};
use topoface::evaluation::{chamfer_stats, rigid_align, ChamferConfig, ChamferReport, LandmarkSource, Similarity};
use topoface::fusion::fuse_initial;
use topoface::geometry::{Mesh, TemplateMesh};
use topoface::io;
use topoface::morphable::{fit, synthesize, FitConfig, FitResult, PointTargets};
use topoface::pipeline::{reconstruct, ReconstructOptions};
use topoface::solver::{SolveMode, SolveReport, SolverConfig, Termination};
use topoface::synth::{generate, linear_model, NoiseSpec, SceneSpec, TemplateSource};
use topoface::{Error, Vec3};

/// Exit code for invalid arguments, matching clap's.
const EXIT_USAGE: u8 = 2;
const EXIT_SOLVER: u8 = 4;

#[derive(Parser)]
#[command(name = "topoface", version, about = "Template-consistent face meshes from per-view point maps and UV images")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "TOPOFACE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct a mesh from a scene manifest.
    Reconstruct(ReconstructArgs),
    /// Generate a synthetic scene directory with ground truth.
    Synth(SynthArgs),
    /// Align a mesh to a reference by landmarks and measure chamfer statistics.
    Eval(EvalArgs),
    /// Fit a linear shape model to a scene's point maps.
    FitLinear(FitArgs),
}

#[derive(Args)]
struct CorrespondenceArgs {
    /// Percentile of per-view lookup distances used as the visibility threshold.
    #[arg(long, default_value_t = 70.0)]
    percentile: f64,
}

impl CorrespondenceArgs {
    fn config(&self) -> CorrespondenceConfig {
        CorrespondenceConfig {
            percentile: self.percentile,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct ReconstructArgs {
    manifest: PathBuf,
    /// Output mesh (.obj keeps the template UVs, .ply is binary).
    #[arg(short, long)]
    output: PathBuf,
    /// JSON report path [default: output with a .json extension].
    #[arg(long)]
    report: Option<PathBuf>,
    /// Refined cameras as JSON.
    #[arg(long)]
    cameras: Option<PathBuf>,
    #[command(flatten)]
    correspondence: CorrespondenceArgs,
    /// Weight of the Laplacian term.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, value_enum, default_value_t = SolveMode::Alternating)]
    mode: SolveMode,
    /// Skip bundle adjustment and mesh the fused point cloud.
    #[arg(long)]
    no_ba: bool,
    /// Drop the Laplacian term (lambda = 0).
    #[arg(long)]
    no_laplacian: bool,
    /// Refine focal lengths and principal points too.
    #[arg(long)]
    free_intrinsics: bool,
    #[arg(long, default_value_t = 20)]
    max_outer_iters: usize,
    #[arg(long, default_value_t = 50)]
    max_lm_iters: usize,
    /// Huber scale in pixels for reprojection residuals.
    #[arg(long)]
    huber: Option<f64>,
    /// Recorded in the report; reconstruction itself is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene directory to create.
    #[arg(short, long)]
    output: PathBuf,
    /// Template OBJ; its positions become the ground truth.
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    subdivisions: usize,
    #[arg(long, default_value_t = 60.0)]
    cap_degrees: f64,
    #[arg(long, default_value_t = 16)]
    views: usize,
    #[arg(long, default_value_t = 518)]
    size: usize,
    #[arg(long, default_value_t = 3.0)]
    radius: f64,
    #[arg(long, default_value_t = 80.0)]
    azimuth_span: f64,
    #[arg(long, default_value_t = 10.0)]
    elevation_jitter: f64,
    #[arg(long, default_value_t = 1.0)]
    relief: f64,
    /// Track noise in pixels.
    #[arg(long, default_value_t = 0.0)]
    track_sigma: f64,
    /// Point-map noise in world units.
    #[arg(long, default_value_t = 0.0)]
    point_sigma: f64,
    /// Initial camera rotation error in degrees.
    #[arg(long, default_value_t = 0.5)]
    rotation_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    uv_sigma: f64,
    /// Fraction of vertices left with at most one view.
    #[arg(long, default_value_t = 0.0)]
    occlusion: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write a linear shape model with this many components.
    #[arg(long, default_value_t = 0)]
    model_components: usize,
    /// Scale of the model's orthonormal components.
    #[arg(long, default_value_t = 0.05)]
    model_scale: f64,
}

#[derive(Args)]
struct EvalArgs {
    predicted: PathBuf,
    reference: PathBuf,
    /// Reference landmarks (six vertex indices or six points).
    #[arg(long)]
    landmarks: Option<PathBuf>,
    /// Landmarks on the predicted mesh [default: same file as --landmarks].
    #[arg(long)]
    predicted_landmarks: Option<PathBuf>,
    /// Rotation and translation only.
    #[arg(long)]
    rigid: bool,
    /// Also measure reference-to-prediction distances.
    #[arg(long)]
    symmetric: bool,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Multiplier on all reported distances, e.g. 1000 for meters to millimeters.
    #[arg(long, default_value_t = 1.0)]
    unit_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report path [default: stdout].
    #[arg(long)]
    report: Option<PathBuf>,
    /// PLY of the aligned prediction with per-vertex distance as quality.
    #[arg(long)]
    error_map: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Fitted mesh.
    #[arg(short, long)]
    output: PathBuf,
    /// JSON report path [default: stdout].
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    correspondence: CorrespondenceArgs,
    #[arg(long, default_value_t = 1e-2)]
    step_size: f64,
    #[arg(long, default_value_t = 2000)]
    max_steps: usize,
}

#[derive(Serialize)]
struct ReconstructSummary {
    manifest: PathBuf,
    views: usize,
    vertices: usize,
    tracks: usize,
    visible_per_view: Vec<usize>,
    thresholds: Vec<Option<f64>>,
    /// Vertices with no visible track after fusion.
    unseen_vertices: usize,
    bundle_adjustment: bool,
    seed: u64,
    solve: Option<SolveReport>,
}

#[derive(Serialize)]
struct EvalSummary {
    alignment: Option<Similarity>,
    chamfer: ChamferReport,
}

#[derive(Serialize)]
struct FitSummary {
    #[serde(flatten)]
    result: FitResult,
    targets: usize,
}

/// Either a library error or an argument problem found after parsing.
enum Failure {
    Usage(String),
    Lib(Error),
    Solver(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult = Result<(), Failure>;

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn emit(report: Option<&Path>, json: &str) -> Result<(), Error> {
    match report {
        Some(p) => write_text(p, json),
        None => {
            let mut out = std::io::stdout().lock();
            match writeln!(out, "{json}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
                    path: PathBuf::from("<stdout>"),
                    source: e,
                }),
                _ => Ok(()),
            }
        }
    }
}

fn write_output_mesh(path: &Path, mesh: &Mesh, template: &TemplateMesh) -> Result<(), Error> {
    io::write_mesh(path, mesh, Some(template.uv()), None)
}

fn run_reconstruct(a: &ReconstructArgs) -> CliResult {
    let scene = io::load_scene(&a.manifest)?;
    let solver = SolverConfig {
        lambda: if a.no_laplacian { 0.0 } else { a.lambda },
        mode: a.mode,
        max_outer_iters: a.max_outer_iters,
        max_lm_iters: a.max_lm_iters,
        freeze_intrinsics: !a.free_intrinsics,
        huber_delta: a.huber,
        ..Default::default()
    };
    let correspondence = a.correspondence.config();
    correspondence.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    solver.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let options = ReconstructOptions {
        correspondence,
        solver,
        bundle_adjust: !a.no_ba,
    };
    let out = reconstruct(&scene.views, &scene.template, &options)?;
    let summary = ReconstructSummary {
        manifest: a.manifest.clone(),
        views: scene.views.len(),
        vertices: scene.template.len(),
        tracks: out.tracks.total_visible(),
        visible_per_view: (0..scene.views.len()).map(|i| out.tracks.visible_in_view(i)).collect(),
        thresholds: (0..scene.views.len()).map(|i| out.tracks.threshold(i)).collect(),
        unseen_vertices: out.initial.constrained.iter().filter(|&&c| !c).count(),
        bundle_adjustment: !a.no_ba,
        seed: a.seed,
        solve: out.report.clone(),
    };
    let report_path = a.report.clone().unwrap_or_else(|| a.output.with_extension("json"));
    write_output_mesh(&a.output, &out.mesh, &scene.template)?;
    write_text(&report_path, &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    if let Some(p) = &a.cameras {
        write_text(p, &io::cameras_json(&out.cameras))?;
    }
    if let Some(r) = &out.report {
        if !r.unconstrained_vertices.is_empty() {
            warn!("{} vertices have fewer than two tracks and no Laplacian term", r.unconstrained_vertices.len());
        }
        if r.termination == Termination::SolverFailure {
            return Err(Failure::Solver("bundle adjustment failed; see the report".into()));
        }
    }
    Ok(())
}

fn run_synth(a: &SynthArgs) -> CliResult {
    let template = match &a.template {
        Some(p) => TemplateSource::Mesh(io::read_template_obj(p)?),
        None => TemplateSource::Icosphere {
            subdivisions: a.subdivisions,
            cap_degrees: a.cap_degrees,
        },
    };
    let spec = SceneSpec {
        template,
        n_views: a.views,
        image_size: a.size,
        radius: a.radius,
        azimuth_span_deg: a.azimuth_span,
        elevation_jitter_deg: a.elevation_jitter,
        target: Vec3::zeros(),
        relief: a.relief,
        noise: NoiseSpec {
            track_sigma_px: a.track_sigma,
            point_sigma: a.point_sigma,
            rotation_sigma_deg: a.rotation_sigma,
            uv_sigma: a.uv_sigma,
        },
        occlusion_fraction: a.occlusion,
        seed: a.seed,
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let scene = generate(&spec)?;
    let model = if a.model_components > 0 {
        Some(linear_model(&scene.template, a.model_components, a.model_scale, a.seed)?)
    } else {
        None
    };
    let manifest = io::write_scene(&a.output, &scene, a.seed, model.as_ref())?;
    info!("wrote {} ({} vertices, {} views)", manifest.display(), scene.template.len(), scene.views.len());
    Ok(())
}

fn run_eval(a: &EvalArgs) -> CliResult {
    let predicted = io::read_mesh(&a.predicted)?;
    let reference = io::read_mesh(&a.reference)?;
    let config = ChamferConfig {
        samples: a.samples,
        seed: a.seed,
        symmetric: a.symmetric,
        unit_scale: a.unit_scale,
    };
    if a.samples == 0 || !(a.unit_scale > 0.0 && a.unit_scale.is_finite()) {
        return Err(Failure::Usage("--samples and --unit-scale must be positive".into()));
    }
    let alignment = match (&a.landmarks, &a.predicted_landmarks) {
        (None, None) => None,
        (reference_lm, predicted_lm) => {
            let ref_src = io::read_landmarks(reference_lm.as_ref().or(predicted_lm.as_ref()).expect("one is set"))?;
            let pred_src: LandmarkSource = match predicted_lm {
                Some(p) => io::read_landmarks(p)?,
                None => ref_src.clone(),
            };
            let src = pred_src.resolve(&predicted)?;
            let dst = ref_src.resolve(&reference)?;
            Some(rigid_align(&src, &dst, !a.rigid)?)
        }
    };
    let aligned = alignment.as_ref().map_or_else(|| predicted.clone(), |s| s.apply_mesh(&predicted));
    let chamfer = chamfer_stats(&aligned, &reference, &config)?;
    if let Some(p) = &a.error_map {
        io::write_ply(p, &aligned, Some(&chamfer.per_vertex))?;
    }
    let summary = EvalSummary { alignment, chamfer };
    emit(a.report.as_deref(), &serde_json::to_string_pretty(&summary).expect("report serializes"))?;
    Ok(())
}

fn run_fit(a: &FitArgs) -> CliResult {
    let scene = io::load_scene(&a.manifest)?;
    let model = io::read_model(&a.model)?;
    if model.n_vertices() != scene.template.len() {
        return Err(Error::SizeMismatch {
            expected: scene.template.len(),
            actual: model.n_vertices(),
        }
        .into());
    }
    let config = FitConfig {
        step_size: a.step_size,
        max_steps: a.max_steps,
        ..Default::default()
    };
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let correspondence = a.correspondence.config();
    correspondence.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let mut tracks = build_tracks(&scene.views, &scene.template, &correspondence)?;
    fuse_initial(&scene.views, &mut tracks)?;
    let targets = PointTargets::from_views(&scene.views, &tracks)?;
    let result = fit(&model, &targets, &config)?;
    let positions = synthesize(&model, &result.coefficients, &result.rigid)?;
    let mesh = Mesh::new(positions, scene.template.faces().to_vec())?;
    write_output_mesh(&a.output, &mesh, &scene.template)?;
    let summary = FitSummary {
        targets: targets.weights().iter().filter(|&&w| w > 0.0).count(),
        result,
    };
    emit(a.report.as_deref(), &serde_json::to_string_pretty(&summary).expect("report serializes"))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("could not size the thread pool: {e}");
        }
    }
    let result = match &cli.command {
        Command::Reconstruct(a) => run_reconstruct(a),
        Command::Synth(a) => run_synth(a),
        Command::Eval(a) => run_eval(a),
        Command::FitLinear(a) => run_fit(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Solver(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_SOLVER)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
