//! Laplacian-regularized bundle adjustment.
//!
//! The objective is
//!
//! ```text
//! sum_ij v_ij |pi(K_i, R_i, t_i, p_j) - q_ij|^2  +  lambda * sum_j |p_j - mean_{k in N(j)} p_k|^2
//! ```
//!
//! minimized with Levenberg-Marquardt. Normal equations are solved by
//! eliminating the point block (a sparse Cholesky factorization, since the
//! Laplacian couples neighboring points) and solving the reduced camera system
//! densely.
//!
//! Two schedules are available. [`SolveMode::Joint`] minimizes the objective
//! over cameras and points at once. [`SolveMode::Alternating`] repeats a
//! reprojection-only stage over cameras and points followed by a stage that
//! refines points against the full objective with cameras held fixed, until
//! the full objective stops changing.

mod linear;
mod lm;
mod system;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use lm::solve;
pub use system::{
    build_system, evaluate, jacobian, Evaluation, Jacobian, Observation, ObservationJacobian, ParameterLayout,
    ResidualSystem, State, Terms, BEHIND_CAMERA_RESIDUAL,
};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    #[default]
    Alternating,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Weight of the Laplacian term; 0 gives plain bundle adjustment.
    pub lambda: f64,
    pub mode: SolveMode,
    pub max_outer_iters: usize,
    /// LM iteration cap per stage.
    pub max_lm_iters: usize,
    pub cost_rel_tol: f64,
    pub param_tol: f64,
    pub freeze_intrinsics: bool,
    pub freeze_first_camera: bool,
    /// Huber scale in pixels for reprojection residuals.
    pub huber_delta: Option<f64>,
    pub lm_damping_init: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            mode: SolveMode::Alternating,
            max_outer_iters: 20,
            max_lm_iters: 50,
            cost_rel_tol: 1e-8,
            param_tol: 1e-10,
            freeze_intrinsics: true,
            freeze_first_camera: true,
            huber_delta: None,
            lm_damping_init: 1e-4,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidInput(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        for (name, v) in [
            ("cost_rel_tol", self.cost_rel_tol),
            ("param_tol", self.param_tol),
            ("lm_damping_init", self.lm_damping_init),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(d) = self.huber_delta {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::InvalidInput(format!("huber_delta must be positive, got {d}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    CostTol,
    ParamTol,
    MaxIters,
    SolverFailure,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// Reprojection terms only; cameras and points free.
    Reprojection,
    /// Reprojection and Laplacian terms; cameras fixed.
    PointsWithLaplacian,
    /// Full objective; cameras and points free.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub kind: StageKind,
    /// Cost of the stage's objective: the initial value, then one entry per
    /// accepted step.
    pub cost_trajectory: Vec<f64>,
    pub iterations: usize,
    pub rejected_steps: usize,
    pub termination: Termination,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub mode: SolveMode,
    pub lambda: f64,
    pub termination: Termination,
    pub stages: Vec<StageReport>,
    /// Full objective before solving and after each outer iteration.
    pub outer_costs: Vec<f64>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub initial_rms_px: f64,
    pub final_rms_px: f64,
    pub observations: usize,
    /// Observations that ended behind their camera.
    pub behind_camera: usize,
    /// Vertices with fewer than two tracks when the Laplacian term is off;
    /// their positions are not determined by the objective.
    pub unconstrained_vertices: Vec<usize>,
    #[serde(with = "duration_secs")]
    pub duration: Duration,
}

impl SolveReport {
    pub fn accepted_steps(&self) -> usize {
        self.stages.iter().map(|s| s.cost_trajectory.len().saturating_sub(1)).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Ok(Duration::from_secs_f64(secs.max(0.0)))
    }
}
