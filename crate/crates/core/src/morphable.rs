//! Fitting a linear shape model to the fused point-map evidence.
//!
//! The model places vertex `j` at `x_j = s R (mean_j + B_j c) + t` and the
//! fit minimizes `L = sum_i sum_j v_ij |x_j - X_i[q_ij]|^2` over the
//! coefficients `c` and the similarity `(R, t, s)` with Adam.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::correspondence::TrackSet;
use crate::evaluation::umeyama;
use crate::geometry::camera::{rotation_from_axis_angle, skew};
use crate::geometry::ViewPrediction;
use crate::{Error, Mat3, Result, Vec3};

/// Smallest accepted ratio between the extreme eigenvalues of `B^T B`.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearShapeModel {
    mean: Vec<Vec3>,
    /// `3N x K`; row `3j + a` is coordinate `a` of vertex `j`.
    basis: DMatrix<f64>,
}

impl LinearShapeModel {
    pub fn new(mean: Vec<Vec3>, basis: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if n == 0 {
            return Err(Error::InvalidInput("shape model has no vertices".into()));
        }
        if basis.nrows() != 3 * n {
            return Err(Error::SizeMismatch {
                expected: 3 * n,
                actual: basis.nrows(),
            });
        }
        if basis.ncols() > 3 * n {
            return Err(Error::RankDeficient(format!(
                "{} components exceed the {} degrees of freedom",
                basis.ncols(),
                3 * n
            )));
        }
        if !mean.iter().flat_map(|p| p.iter()).chain(basis.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("shape model has non-finite entries".into()));
        }
        if basis.ncols() > 0 {
            let gram = basis.transpose() * &basis;
            let ev = gram.symmetric_eigenvalues();
            let (lo, hi) = (ev.min(), ev.max());
            if !(hi > 0.0) || lo <= RANK_TOLERANCE * hi {
                return Err(Error::RankDeficient(format!(
                    "Gram eigenvalues span [{lo:.3e}, {hi:.3e}]"
                )));
            }
        }
        Ok(Self { mean, basis })
    }

    pub fn n_vertices(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.basis.ncols()
    }

    pub fn mean(&self) -> &[Vec3] {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// `mean + B c`, before the similarity.
    pub fn shape(&self, coefficients: &[f64]) -> Result<Vec<Vec3>> {
        if coefficients.len() != self.n_components() {
            return Err(Error::SizeMismatch {
                expected: self.n_components(),
                actual: coefficients.len(),
            });
        }
        let offset = &self.basis * DVector::from_column_slice(coefficients);
        Ok(self
            .mean
            .iter()
            .enumerate()
            .map(|(j, m)| m + Vec3::new(offset[3 * j], offset[3 * j + 1], offset[3 * j + 2]))
            .collect())
    }
}

/// Global similarity applied after the linear combination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidScale {
    /// Axis-angle.
    pub rotation: Vec3,
    pub translation: Vec3,
    pub scale: f64,
}

impl Default for RigidScale {
    fn default() -> Self {
        Self {
            rotation: Vec3::zeros(),
            translation: Vec3::zeros(),
            scale: 1.0,
        }
    }
}

impl RigidScale {
    pub fn matrix(&self) -> Mat3 {
        rotation_from_axis_angle(&self.rotation)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.matrix() * p * self.scale + self.translation
    }
}

pub fn synthesize(model: &LinearShapeModel, coefficients: &[f64], rigid: &RigidScale) -> Result<Vec<Vec3>> {
    let r = rigid.matrix();
    Ok(model
        .shape(coefficients)?
        .iter()
        .map(|y| r * y * rigid.scale + rigid.translation)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_steps: usize,
    /// Stop once the gradient's largest component falls below this.
    pub grad_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_steps: 2000,
            grad_tol: 1e-7,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidInput(format!("step size must be positive, got {}", self.step_size)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidInput(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) || !(self.grad_tol >= 0.0) {
            return Err(Error::InvalidInput("epsilon must be positive and grad_tol non-negative".into()));
        }
        Ok(())
    }
}

/// Per-vertex summary of the point-map samples: `L` only depends on their
/// count, mean and spread.
#[derive(Clone, Debug, PartialEq)]
pub struct PointTargets {
    weight: Vec<f64>,
    mean: Vec<Vec3>,
    /// `sum_i v_ij |X_i[q_ij] - mean_j|^2` over all vertices.
    spread: f64,
}

impl PointTargets {
    /// One unit-weight sample per vertex.
    pub fn from_points(points: &[Vec3]) -> Self {
        Self {
            weight: vec![1.0; points.len()],
            mean: points.to_vec(),
            spread: 0.0,
        }
    }

    /// Samples `X_i[q_ij]` at every visible track with a finite point-map entry.
    pub fn from_views(views: &[ViewPrediction], tracks: &TrackSet) -> Result<Self> {
        if views.len() != tracks.n_views() {
            return Err(Error::SizeMismatch {
                expected: tracks.n_views(),
                actual: views.len(),
            });
        }
        let n = tracks.n_vertices();
        let mut samples: Vec<Vec<Vec3>> = vec![Vec::new(); n];
        for (i, view) in views.iter().enumerate() {
            for (j, s) in samples.iter_mut().enumerate() {
                if !tracks.is_visible(i, j) {
                    continue;
                }
                let q = tracks.track(i, j);
                if let Some(p) = view.point(q.x as usize, q.y as usize) {
                    s.push(p);
                }
            }
        }
        let mut weight = Vec::with_capacity(n);
        let mut mean = Vec::with_capacity(n);
        let mut spread = 0.0;
        for s in &samples {
            let m = if s.is_empty() {
                Vec3::zeros()
            } else {
                s.iter().sum::<Vec3>() / s.len() as f64
            };
            spread += s.iter().map(|p| (p - m).norm_squared()).sum::<f64>();
            weight.push(s.len() as f64);
            mean.push(m);
        }
        if weight.iter().all(|&w| w == 0.0) {
            return Err(Error::NoValidTracks);
        }
        Ok(Self { weight, mean, spread })
    }

    pub fn len(&self) -> usize {
        self.weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    pub fn means(&self) -> &[Vec3] {
        &self.mean
    }

    pub fn loss(&self, x: &[Vec3]) -> f64 {
        self.spread
            + x.iter()
                .zip(&self.weight)
                .zip(&self.mean)
                .map(|((x, w), m)| w * (x - m).norm_squared())
                .sum::<f64>()
    }
}

/// Parameters in optimizer order: `[c (K), rotation (3), translation (3), log scale]`.
pub fn pack(coefficients: &[f64], rigid: &RigidScale) -> DVector<f64> {
    let k = coefficients.len();
    let mut theta = DVector::zeros(k + 7);
    theta.rows_mut(0, k).copy_from_slice(coefficients);
    theta.fixed_rows_mut::<3>(k).copy_from(&rigid.rotation);
    theta.fixed_rows_mut::<3>(k + 3).copy_from(&rigid.translation);
    theta[k + 6] = rigid.scale.ln();
    theta
}

pub fn unpack(theta: &DVector<f64>, k: usize) -> (Vec<f64>, RigidScale) {
    (
        theta.rows(0, k).iter().copied().collect(),
        RigidScale {
            rotation: theta.fixed_rows::<3>(k).into_owned(),
            translation: theta.fixed_rows::<3>(k + 3).into_owned(),
            scale: theta[k + 6].exp(),
        },
    )
}

/// Right Jacobian of SO(3): `d exp(w + dw) = exp(w) exp(J_r(w) dw)`.
fn right_jacobian(w: &Vec3) -> Mat3 {
    let theta = w.norm();
    let k = skew(w);
    if theta < 1e-6 {
        return Mat3::identity() - k * 0.5 + k * k / 6.0;
    }
    let t2 = theta * theta;
    Mat3::identity() - k * ((1.0 - theta.cos()) / t2) + k * k * ((theta - theta.sin()) / (t2 * theta))
}

/// Loss and its gradient with respect to the packed parameters.
pub fn loss_and_gradient(model: &LinearShapeModel, targets: &PointTargets, theta: &DVector<f64>) -> (f64, DVector<f64>) {
    loss_and_gradient_about(model, targets, theta, &Vec3::zeros())
}

/// As `loss_and_gradient` with rotation and scale acting about `center`:
/// `x = s R (y - center) + t`.
fn loss_and_gradient_about(
    model: &LinearShapeModel,
    targets: &PointTargets,
    theta: &DVector<f64>,
    center: &Vec3,
) -> (f64, DVector<f64>) {
    let k = model.n_components();
    let (c, rigid) = unpack(theta, k);
    let r = rigid.matrix();
    let s = rigid.scale;
    let mut y = model.shape(&c).expect("coefficient count matches");
    y.iter_mut().for_each(|p| *p -= center);

    let mut grad = DVector::zeros(k + 7);
    let mut g_shape = DVector::zeros(3 * y.len());
    let mut g_rot = Vec3::zeros();
    let mut g_t = Vec3::zeros();
    let mut g_logs = 0.0;
    let mut loss = targets.spread;
    for (j, yj) in y.iter().enumerate() {
        let w = targets.weight[j];
        if w == 0.0 {
            continue;
        }
        let ry = r * yj;
        let x = ry * s + rigid.translation;
        let d = x - targets.mean[j];
        loss += w * d.norm_squared();
        let g = d * (2.0 * w);
        g_t += g;
        g_logs += g.dot(&ry) * s;
        let rtg = r.transpose() * g * s;
        g_rot += yj.cross(&rtg);
        g_shape.fixed_rows_mut::<3>(3 * j).copy_from(&rtg);
    }
    grad.rows_mut(0, k).copy_from(&(model.basis.transpose() * g_shape));
    grad.fixed_rows_mut::<3>(k).copy_from(&(right_jacobian(&rigid.rotation).transpose() * g_rot));
    grad.fixed_rows_mut::<3>(k + 3).copy_from(&g_t);
    grad[k + 6] = g_logs;
    (loss, grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub coefficients: Vec<f64>,
    pub rigid: RigidScale,
    pub initial_loss: f64,
    pub loss: f64,
    pub steps: usize,
    pub converged: bool,
}

/// Similarity taking the mean shape onto the target means, used as the
/// starting pose. Falls back to the identity when too few vertices carry
/// samples.
fn initial_rigid(model: &LinearShapeModel, targets: &PointTargets) -> RigidScale {
    let (src, dst): (Vec<Vec3>, Vec<Vec3>) = (0..model.n_vertices())
        .filter(|&j| targets.weight[j] > 0.0)
        .map(|j| (model.mean[j], targets.mean[j]))
        .unzip();
    match umeyama(&src, &dst, true) {
        Ok(sim) => RigidScale {
            rotation: crate::geometry::camera::axis_angle_from_rotation(&sim.rotation),
            translation: sim.translation,
            scale: sim.scale,
        },
        Err(_) => RigidScale::default(),
    }
}

/// Adam on the packed parameters from zero coefficients and the landmark-free
/// similarity initialization. Deterministic.
pub fn fit(model: &LinearShapeModel, targets: &PointTargets, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if targets.len() != model.n_vertices() {
        return Err(Error::SizeMismatch {
            expected: model.n_vertices(),
            actual: targets.len(),
        });
    }
    let k = model.n_components();
    // Optimize with rotation about the mean shape's centroid, which decouples
    // it from the translation.
    let center = model.mean.iter().sum::<Vec3>() / model.n_vertices().max(1) as f64;
    let start = initial_rigid(model, targets);
    let mut theta = pack(
        &vec![0.0; k],
        &RigidScale {
            translation: start.translation + start.matrix() * center * start.scale,
            ..start
        },
    );
    let (initial_loss, _) = loss_and_gradient_about(model, targets, &theta, &center);
    let limit = 1e3 * initial_loss;
    let mut m = DVector::zeros(theta.len());
    let mut v = DVector::zeros(theta.len());
    let mut loss = initial_loss;
    let mut converged = false;
    let mut steps = 0;
    for step in 1..=config.max_steps {
        let (l, g) = loss_and_gradient_about(model, targets, &theta, &center);
        loss = l;
        if !l.is_finite() || l > limit {
            return Err(Error::Divergence { loss: l, limit });
        }
        if g.amax() < config.grad_tol {
            converged = true;
            break;
        }
        m = &m * config.beta1 + &g * (1.0 - config.beta1);
        v = &v * config.beta2 + g.component_mul(&g) * (1.0 - config.beta2);
        let mh = &m / (1.0 - config.beta1.powi(step as i32));
        let vh = &v / (1.0 - config.beta2.powi(step as i32));
        theta -= mh.zip_map(&vh, |a, b| config.step_size * a / (b.sqrt() + config.epsilon));
        steps = step;
    }
    if steps == config.max_steps {
        let (l, _) = loss_and_gradient_about(model, targets, &theta, &center);
        if !l.is_finite() || l > limit {
            return Err(Error::Divergence { loss: l, limit });
        }
        loss = l;
    }
    let (coefficients, mut rigid) = unpack(&theta, k);
    rigid.translation -= rigid.matrix() * center * rigid.scale;
    Ok(FitResult {
        coefficients,
        rigid,
        initial_loss,
        loss,
        steps,
        converged,
    })
}
