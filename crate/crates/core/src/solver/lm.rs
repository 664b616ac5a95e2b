use std::time::Instant;

use log::debug;

use super::linear::{NormalEquations, PointPattern};
use super::system::{evaluate, jacobian, Evaluation, ParameterLayout, ResidualSystem, State, Terms};
use super::{SolveMode, SolveReport, SolverConfig, StageKind, StageReport, Termination};
use crate::Result;

/// Consecutive failed linear solves tolerated before giving up.
const MAX_SOLVE_FAILURES: usize = 10;
const MAX_DAMPING: f64 = 1e32;

struct Stage<'a> {
    system: &'a ResidualSystem,
    terms: Terms,
    layout: ParameterLayout,
    pattern: PointPattern,
    kind: StageKind,
}

impl<'a> Stage<'a> {
    fn new(system: &'a ResidualSystem, kind: StageKind, initial: &State) -> Result<Self> {
        let (terms, cameras_free) = match kind {
            StageKind::Reprojection => (Terms::REPROJECTION, true),
            StageKind::PointsWithLaplacian => (Terms::ALL, false),
            StageKind::Joint => (Terms::ALL, true),
        };
        let mut layout = ParameterLayout::new(system, system.n_points(), cameras_free);
        if kind == StageKind::Joint && system.laplacian_active(terms) {
            fix_scale(system, initial, &mut layout);
        }
        Ok(Self {
            system,
            terms,
            layout,
            pattern: PointPattern::new(system, terms)?,
            kind,
        })
    }

    fn evaluate(&self, state: &State) -> Evaluation {
        evaluate(self.system, state, self.terms)
    }

    /// Levenberg-Marquardt with Nielsen's damping update. Only steps that
    /// strictly lower the stage cost are accepted.
    fn run(&self, state: &mut State, config: &SolverConfig) -> StageReport {
        let mut eval = self.evaluate(state);
        let mut report = StageReport {
            kind: self.kind,
            cost_trajectory: vec![eval.cost],
            iterations: 0,
            rejected_steps: 0,
            termination: Termination::MaxIters,
        };
        if !eval.cost.is_finite() {
            report.termination = Termination::SolverFailure;
            return report;
        }
        let mut mu = config.lm_damping_init;
        let mut nu = 2.0;
        let mut failures = 0;
        let mut relinearize = true;
        let mut normal = None;
        let mut diag = None;

        while report.iterations < config.max_lm_iters {
            if relinearize {
                let jac = jacobian(self.system, state, &self.layout, self.terms);
                let ne = NormalEquations::assemble(self.system, &self.layout, self.terms, &eval, &jac, &self.pattern);
                let g = ne.gradient();
                if !g.iter().all(|v| v.is_finite()) {
                    report.termination = Termination::SolverFailure;
                    return report;
                }
                if g.amax() <= f64::EPSILON * eval.cost.max(f64::MIN_POSITIVE).sqrt() || eval.cost == 0.0 {
                    report.termination = Termination::CostTol;
                    return report;
                }
                diag = Some(ne.damping_diagonal(&self.pattern));
                normal = Some(ne);
                relinearize = false;
            }
            let ne = normal.as_ref().expect("linearized");
            let d = diag.as_ref().expect("linearized");
            report.iterations += 1;

            let Some(dx) = ne.solve(&self.pattern, d, mu) else {
                failures += 1;
                debug!("{:?}: linear solve failed (mu = {mu:.3e})", self.kind);
                if failures >= MAX_SOLVE_FAILURES || mu >= MAX_DAMPING {
                    report.termination = Termination::SolverFailure;
                    return report;
                }
                mu *= nu;
                nu *= 2.0;
                continue;
            };
            failures = 0;

            let g = ne.gradient();
            let predicted = 0.5 * dx.dot(&(d.component_mul(&dx) * mu - &g));
            let candidate = state.retract(&self.layout, dx.as_slice());
            let cand_eval = self.evaluate(&candidate);
            let actual = eval.cost - cand_eval.cost;

            if cand_eval.cost.is_finite() && actual > 0.0 {
                let rho = if predicted > 0.0 { actual / predicted } else { 1.0 };
                mu *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                nu = 2.0;
                let step_norm = dx.norm();
                let param_norm = state_norm(state);
                let prev = eval.cost;
                *state = candidate;
                eval = cand_eval;
                report.cost_trajectory.push(eval.cost);
                relinearize = true;
                debug!("{:?}: iter {} cost {:.6e} mu {:.2e}", self.kind, report.iterations, eval.cost, mu);
                if actual <= config.cost_rel_tol * prev {
                    report.termination = Termination::CostTol;
                    return report;
                }
                if step_norm <= config.param_tol * (param_norm + config.param_tol) {
                    report.termination = Termination::ParamTol;
                    return report;
                }
            } else {
                report.rejected_steps += 1;
                if dx.norm() <= config.param_tol * (state_norm(state) + config.param_tol) {
                    report.termination = Termination::ParamTol;
                    return report;
                }
                mu *= nu;
                nu *= 2.0;
                if mu >= MAX_DAMPING {
                    report.termination = Termination::CostTol;
                    return report;
                }
            }
        }
        report
    }
}

/// The Laplacian cost shrinks with the scene, so with cameras free the
/// objective has no minimum along the scale gauge left open by the first
/// camera. Scaling about the first camera's center moves the second camera's
/// translation along the first center expressed in the second frame; holding
/// its largest component fixed removes that direction.
fn fix_scale(system: &ResidualSystem, initial: &State, layout: &mut ParameterLayout) {
    if !system.first_camera_frozen() || system.n_cameras() < 2 || !layout.is_pose_free(1) {
        return;
    }
    let pose = &initial.cameras[1].pose;
    let d = pose.transform(&initial.cameras[0].pose.center());
    let k = d.iamax();
    if d[k] != 0.0 {
        layout.freeze(1, 3 + k);
    }
}

fn state_norm(state: &State) -> f64 {
    let p: f64 = state.points.iter().map(|p| p.norm_squared()).sum();
    let c: f64 = state
        .cameras
        .iter()
        .map(|c| c.pose.translation().norm_squared() + c.pose.axis_angle().norm_squared())
        .sum();
    (p + c).sqrt()
}

/// Refines `initial` against `system`. Returns the refined state and a report;
/// the first camera is left untouched when frozen.
pub fn solve(system: &ResidualSystem, initial: &State, config: &SolverConfig) -> Result<(State, SolveReport)> {
    config.validate()?;
    let started = Instant::now();
    let mut state = initial.clone();
    let full = |s: &State| evaluate(system, s, Terms::ALL);
    let initial_eval = full(&state);

    let mut stages = Vec::new();
    let mut outer_costs = vec![initial_eval.cost];
    let termination = match config.mode {
        SolveMode::Joint => {
            let stage = Stage::new(system, StageKind::Joint, &state)?;
            let r = stage.run(&mut state, config);
            let t = r.termination;
            stages.push(r);
            outer_costs.push(full(&state).cost);
            t
        }
        SolveMode::Alternating => {
            let reproj = Stage::new(system, StageKind::Reprojection, &state)?;
            let points = Stage::new(system, StageKind::PointsWithLaplacian, &state)?;
            let mut termination = Termination::MaxIters;
            for outer in 0..config.max_outer_iters {
                let a = reproj.run(&mut state, config);
                let failed_a = a.termination == Termination::SolverFailure;
                stages.push(a);
                if failed_a {
                    termination = Termination::SolverFailure;
                    break;
                }
                let b = points.run(&mut state, config);
                let failed_b = b.termination == Termination::SolverFailure;
                stages.push(b);
                if failed_b {
                    termination = Termination::SolverFailure;
                    break;
                }
                let cost = full(&state).cost;
                let prev = *outer_costs.last().expect("initial cost");
                outer_costs.push(cost);
                debug!("outer {outer}: cost {cost:.6e}");
                if (prev - cost).abs() <= config.cost_rel_tol * prev.abs() {
                    termination = Termination::CostTol;
                    break;
                }
            }
            termination
        }
    };

    let final_eval = full(&state);
    let unconstrained_vertices = if system.lambda() == 0.0 {
        system.weakly_observed_vertices()
    } else {
        Vec::new()
    };
    let report = SolveReport {
        mode: config.mode,
        lambda: system.lambda(),
        termination,
        stages,
        outer_costs,
        initial_cost: initial_eval.cost,
        final_cost: final_eval.cost,
        initial_rms_px: initial_eval.rms_reprojection(),
        final_rms_px: final_eval.rms_reprojection(),
        observations: system.observations().len(),
        behind_camera: final_eval.behind_camera,
        unconstrained_vertices,
        duration: started.elapsed(),
    };
    Ok((state, report))
}
