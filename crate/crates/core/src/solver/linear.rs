//! Damped normal equations `(H + mu D) dx = -g` with `H = J^T J`.
//!
//! Points are eliminated first. Their block is sparse but not block-diagonal
//! once the Laplacian couples each vertex to its 2-ring, so it is factorized
//! with a sparse Cholesky (fill-reducing ordering, symbolic analysis reused
//! across iterations). The reduced camera system is small and solved densely.

use std::collections::HashMap;

use faer::prelude::Solve;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{Argsort, Pair, SparseColMat, SymbolicSparseColMat};
use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector, SMatrix};

use super::system::{huber, Evaluation, Jacobian, ParameterLayout, ResidualSystem, Terms};
use crate::{Error, Result};

/// Systems with fewer parameters are solved with one dense factorization.
pub(crate) const DENSE_THRESHOLD: usize = 200;

const DIAG_MIN: f64 = 1e-6;
const DIAG_MAX: f64 = 1e32;

/// Block sparsity of the point-point part of `H` (lower triangle, 3x3 blocks).
pub(crate) struct PointPattern {
    n_points: usize,
    /// `(row_block, col_block)` with `row >= col`.
    blocks: Vec<(usize, usize)>,
    diag: Vec<usize>,
    /// Constant Laplacian contribution `lambda * sum w_a w_b` per block (times I3).
    laplacian: Vec<f64>,
    symbolic: SymbolicSparseColMat<usize>,
    argsort: Argsort<usize>,
    llt: SymbolicLlt<usize>,
}

impl PointPattern {
    pub fn new(system: &ResidualSystem, terms: Terms) -> Result<Self> {
        let n = system.n_points();
        let mut index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut blocks = Vec::new();
        let mut laplacian = Vec::new();
        let mut block_id = |a: usize, b: usize, blocks: &mut Vec<(usize, usize)>, laplacian: &mut Vec<f64>| {
            *index.entry((a, b)).or_insert_with(|| {
                blocks.push((a, b));
                laplacian.push(0.0);
                blocks.len() - 1
            })
        };
        let diag: Vec<usize> = (0..n).map(|j| block_id(j, j, &mut blocks, &mut laplacian)).collect();
        if system.laplacian_active(terms) {
            let lambda = system.lambda();
            for (j, ring) in system.neighborhoods().iter().enumerate() {
                let w_ring = -1.0 / ring.len() as f64;
                let support: Vec<(usize, f64)> =
                    std::iter::once((j, 1.0)).chain(ring.iter().map(|&k| (k, w_ring))).collect();
                for &(a, wa) in &support {
                    for &(b, wb) in &support {
                        if a >= b {
                            let id = block_id(a, b, &mut blocks, &mut laplacian);
                            laplacian[id] += lambda * wa * wb;
                        }
                    }
                }
            }
        }
        let mut pairs = Vec::with_capacity(blocks.len() * 9);
        for &(a, b) in &blocks {
            for r in 0..3 {
                for c in 0..3 {
                    if a != b || r >= c {
                        pairs.push(Pair {
                            row: 3 * a + r,
                            col: 3 * b + c,
                        });
                    }
                }
            }
        }
        let (symbolic, argsort) = SymbolicSparseColMat::try_new_from_indices(3 * n, 3 * n, &pairs)
            .map_err(|e| Error::InvalidInput(format!("sparse pattern: {e:?}")))?;
        let llt = SymbolicLlt::try_new(symbolic.as_ref(), Side::Lower)
            .map_err(|e| Error::InvalidInput(format!("symbolic factorization: {e:?}")))?;
        Ok(Self {
            n_points: n,
            blocks,
            diag,
            laplacian,
            symbolic,
            argsort,
            llt,
        })
    }

    fn values(&self, hpp: &[[f64; 9]]) -> Vec<f64> {
        let mut vals = Vec::with_capacity(self.blocks.len() * 9);
        for (&(a, b), blk) in self.blocks.iter().zip(hpp) {
            for r in 0..3 {
                for c in 0..3 {
                    if a != b || r >= c {
                        vals.push(blk[3 * r + c]);
                    }
                }
            }
        }
        vals
    }
}

/// Camera-point coupling `J_c^T J_p` of one observation.
struct Coupling {
    cam_start: usize,
    cam_dim: usize,
    point: usize,
    block: SMatrix<f64, 10, 3>,
}

pub(crate) struct NormalEquations {
    hcc: DMatrix<f64>,
    gc: DVector<f64>,
    hpp: Vec<[f64; 9]>,
    gp: Vec<f64>,
    coupling: Vec<Coupling>,
}

impl NormalEquations {
    pub fn assemble(
        system: &ResidualSystem,
        layout: &ParameterLayout,
        terms: Terms,
        eval: &Evaluation,
        jac: &Jacobian,
        pattern: &PointPattern,
    ) -> Self {
        let nc = layout.n_camera_params();
        let mut hcc = DMatrix::zeros(nc, nc);
        let mut gc = DVector::zeros(nc);
        let mut hpp: Vec<[f64; 9]> = pattern
            .laplacian
            .iter()
            .map(|&w| {
                let mut b = [0.0; 9];
                b[0] = w;
                b[4] = w;
                b[8] = w;
                b
            })
            .collect();
        let mut gp = vec![0.0; 3 * pattern.n_points];
        let mut coupling = Vec::new();

        if terms.reprojection {
            for ((o, oj), r) in system.observations().iter().zip(&jac.observations).zip(&eval.reprojection) {
                let (_, weight) = huber(r.norm_squared(), system.huber_delta());
                let jp = oj.d_point;
                let wp = jp.transpose() * jp * weight;
                let gpt = jp.transpose() * r * weight;
                let d = pattern.diag[o.point];
                for k in 0..9 {
                    hpp[d][k] += wp[(k / 3, k % 3)];
                }
                for a in 0..3 {
                    gp[3 * o.point + a] += gpt[a];
                }
                let (start, dim) = layout.camera_block[o.camera];
                if dim == 0 {
                    continue;
                }
                let cols: Vec<usize> = layout.active_local(o.camera).collect();
                let mut jc = SMatrix::<f64, 2, 10>::zeros();
                for (n, &local) in cols.iter().enumerate() {
                    jc.set_column(n, &oj.d_camera.column(local));
                }
                let hc = jc.transpose() * jc * weight;
                let gct = jc.transpose() * r * weight;
                for a in 0..dim {
                    gc[start + a] += gct[a];
                    for b in 0..dim {
                        hcc[(start + a, start + b)] += hc[(a, b)];
                    }
                }
                coupling.push(Coupling {
                    cam_start: start,
                    cam_dim: dim,
                    point: o.point,
                    block: jc.transpose() * jp * weight,
                });
            }
        }

        if system.laplacian_active(terms) {
            let s = system.lambda().sqrt();
            for (j, ring) in system.neighborhoods().iter().enumerate() {
                let l = eval.laplacian[j];
                let w_ring = -s / ring.len() as f64;
                for a in 0..3 {
                    gp[3 * j + a] += s * l[a];
                    for &k in ring {
                        gp[3 * k + a] += w_ring * l[a];
                    }
                }
            }
        }

        Self {
            hcc,
            gc,
            hpp,
            gp,
            coupling,
        }
    }

    pub fn gradient(&self) -> DVector<f64> {
        let mut g = DVector::zeros(self.gc.len() + self.gp.len());
        g.rows_mut(0, self.gc.len()).copy_from(&self.gc);
        g.rows_mut(self.gc.len(), self.gp.len()).copy_from_slice(&self.gp);
        g
    }

    /// Marquardt scaling: the diagonal of `H`, clamped.
    pub fn damping_diagonal(&self, pattern: &PointPattern) -> DVector<f64> {
        let nc = self.gc.len();
        let mut d = DVector::zeros(nc + self.gp.len());
        for i in 0..nc {
            d[i] = self.hcc[(i, i)];
        }
        for (j, &blk) in pattern.diag.iter().enumerate() {
            for a in 0..3 {
                d[nc + 3 * j + a] = self.hpp[blk][4 * a];
            }
        }
        d.map(|v| v.clamp(DIAG_MIN, DIAG_MAX))
    }

    /// Solves `(H + mu D) dx = -g`. `None` when the damped system is not
    /// numerically positive definite.
    pub fn solve(&self, pattern: &PointPattern, diag: &DVector<f64>, mu: f64) -> Option<DVector<f64>> {
        let n = self.gc.len() + self.gp.len();
        let dx = if n < DENSE_THRESHOLD {
            self.solve_dense(pattern, diag, mu)
        } else {
            self.solve_schur(pattern, diag, mu)
        }?;
        dx.iter().all(|v| v.is_finite()).then_some(dx)
    }

    fn damped_hpp(&self, pattern: &PointPattern, diag: &DVector<f64>, mu: f64) -> Vec<[f64; 9]> {
        let nc = self.gc.len();
        let mut hpp = self.hpp.clone();
        for (j, &blk) in pattern.diag.iter().enumerate() {
            for a in 0..3 {
                hpp[blk][4 * a] += mu * diag[nc + 3 * j + a];
            }
        }
        hpp
    }

    /// Full dense `H + mu D`, for small systems and for tests.
    pub fn dense_matrix(&self, pattern: &PointPattern, diag: &DVector<f64>, mu: f64) -> DMatrix<f64> {
        let nc = self.gc.len();
        let n = nc + self.gp.len();
        let mut h = DMatrix::zeros(n, n);
        h.view_mut((0, 0), (nc, nc)).copy_from(&self.hcc);
        for i in 0..nc {
            h[(i, i)] += mu * diag[i];
        }
        let hpp = self.damped_hpp(pattern, diag, mu);
        for (&(a, b), blk) in pattern.blocks.iter().zip(&hpp) {
            for r in 0..3 {
                for c in 0..3 {
                    let (row, col) = (nc + 3 * a + r, nc + 3 * b + c);
                    h[(row, col)] = blk[3 * r + c];
                    h[(col, row)] = blk[3 * r + c];
                }
            }
        }
        for cp in &self.coupling {
            for a in 0..cp.cam_dim {
                for c in 0..3 {
                    let (row, col) = (cp.cam_start + a, nc + 3 * cp.point + c);
                    h[(row, col)] += cp.block[(a, c)];
                    h[(col, row)] += cp.block[(a, c)];
                }
            }
        }
        h
    }

    pub(crate) fn solve_dense(&self, pattern: &PointPattern, diag: &DVector<f64>, mu: f64) -> Option<DVector<f64>> {
        let h = self.dense_matrix(pattern, diag, mu);
        let chol = h.cholesky()?;
        Some(chol.solve(&(-self.gradient())))
    }

    pub(crate) fn solve_schur(&self, pattern: &PointPattern, diag: &DVector<f64>, mu: f64) -> Option<DVector<f64>> {
        let nc = self.gc.len();
        let np = self.gp.len();
        let hpp = self.damped_hpp(pattern, diag, mu);
        let vals = pattern.values(&hpp);
        let mat = SparseColMat::<usize, f64>::new_from_argsort(pattern.symbolic.clone(), &pattern.argsort, &vals).ok()?;
        let llt = Llt::try_new_with_symbolic(pattern.llt.clone(), mat.as_ref(), Side::Lower).ok()?;

        // Right-hand sides: H_pc (one column per camera parameter) and -g_p.
        let mut rhs = Mat::<f64>::zeros(np, nc + 1);
        for cp in &self.coupling {
            for a in 0..cp.cam_dim {
                for c in 0..3 {
                    rhs[(3 * cp.point + c, cp.cam_start + a)] += cp.block[(a, c)];
                }
            }
        }
        for (i, g) in self.gp.iter().enumerate() {
            rhs[(i, nc)] = -g;
        }
        llt.solve_in_place(rhs.as_mut());

        if nc == 0 {
            return Some(DVector::from_fn(np, |i, _| rhs[(i, 0)]));
        }

        // S = H_cc - H_cp H_pp^-1 H_pc,  b = -g_c - H_cp H_pp^-1 (-g_p).
        let mut s = self.hcc.clone();
        for i in 0..nc {
            s[(i, i)] += mu * diag[i];
        }
        let mut b = -self.gc.clone();
        for cp in &self.coupling {
            for a in 0..cp.cam_dim {
                let row = cp.cam_start + a;
                for c in 0..3 {
                    let w = cp.block[(a, c)];
                    if w == 0.0 {
                        continue;
                    }
                    let pr = 3 * cp.point + c;
                    for col in 0..nc {
                        s[(row, col)] -= w * rhs[(pr, col)];
                    }
                    b[row] -= w * rhs[(pr, nc)];
                }
            }
        }
        let s = (&s + s.transpose()) * 0.5;
        let dc = s.cholesky()?.solve(&b);

        let mut dx = DVector::zeros(nc + np);
        dx.rows_mut(0, nc).copy_from(&dc);
        for i in 0..np {
            let mut v = rhs[(i, nc)];
            for col in 0..nc {
                v -= rhs[(i, col)] * dc[col];
            }
            dx[nc + i] = v;
        }
        Some(dx)
    }
}
