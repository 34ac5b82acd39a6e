//! Whitened linear factors and their normal equations, with landmarks
//! eliminated by a block-diagonal Schur complement.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SMatrix, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::STATE_DIM;
use crate::vision::Matrix2x9;

type Matrix9x3 = SMatrix<f64, 9, 3>;

/// Identifies the nonlinear factor a block of rows came from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FactorId {
    /// IMU factor ending at the given frame.
    Imu(usize),
    /// Observation of a landmark (by key) in a frame.
    Projection { frame: usize, landmark: usize },
    /// Marginalization prior created at the given marginalization event.
    Prior(usize),
    /// Prior on the initial state.
    Initial(usize),
}

/// One whitened, linearized factor. Slots index the current window.
#[derive(Clone, Debug)]
pub enum LinearFactor {
    Dense {
        id: FactorId,
        /// `(state slot, rows x 15 block)`
        blocks: Vec<(usize, DMatrix<f64>)>,
        r: DVector<f64>,
    },
    Projection {
        id: FactorId,
        observer: usize,
        anchor: usize,
        landmark: usize,
        j_obs: Matrix2x9,
        j_anc: Matrix2x9,
        j_lm: Matrix2x3<f64>,
        r: Vector2<f64>,
    },
}

impl LinearFactor {
    pub fn id(&self) -> &FactorId {
        match self {
            LinearFactor::Dense { id, .. } | LinearFactor::Projection { id, .. } => id,
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            LinearFactor::Dense { r, .. } => r.len(),
            LinearFactor::Projection { .. } => 2,
        }
    }

    pub fn cost(&self) -> f64 {
        match self {
            LinearFactor::Dense { r, .. } => r.norm_squared(),
            LinearFactor::Projection { r, .. } => r.norm_squared(),
        }
    }

    /// Rows of the factor laid out over `15 * n_states + 3 * n_landmarks`
    /// columns, plus the residual.
    pub fn dense_rows(&self, n_states: usize, n_landmarks: usize) -> (DMatrix<f64>, DVector<f64>) {
        let cols = STATE_DIM * n_states + 3 * n_landmarks;
        match self {
            LinearFactor::Dense { blocks, r, .. } => {
                let mut j = DMatrix::zeros(r.len(), cols);
                for (slot, b) in blocks {
                    let mut view = j.view_mut((0, STATE_DIM * slot), (r.len(), STATE_DIM));
                    view += b;
                }
                (j, r.clone())
            }
            LinearFactor::Projection { observer, anchor, landmark, j_obs, j_anc, j_lm, r, .. } => {
                let mut j = DMatrix::zeros(2, cols);
                let mut add = |col: usize, b: &Matrix2x9| {
                    let mut view = j.view_mut((0, col), (2, 9));
                    view += b;
                };
                add(STATE_DIM * observer, j_obs);
                add(STATE_DIM * anchor, j_anc);
                j.view_mut((0, STATE_DIM * n_states + 3 * landmark), (2, 3)).copy_from(j_lm);
                (j, DVector::from_column_slice(r.as_slice()))
            }
        }
    }
}

/// Stacked dense `J` and `r` of a set of factors.
pub fn stack_dense(factors: &[LinearFactor], n_states: usize, n_landmarks: usize) -> (DMatrix<f64>, DVector<f64>) {
    let rows: usize = factors.iter().map(|f| f.rows()).sum();
    let cols = STATE_DIM * n_states + 3 * n_landmarks;
    let mut j = DMatrix::zeros(rows, cols);
    let mut r = DVector::zeros(rows);
    let mut at = 0;
    for f in factors {
        let (fj, fr) = f.dense_rows(n_states, n_landmarks);
        j.view_mut((at, 0), (fj.nrows(), cols)).copy_from(&fj);
        r.rows_mut(at, fr.len()).copy_from(&fr);
        at += fr.len();
    }
    (j, r)
}

#[derive(Clone, Debug, Default)]
struct LandmarkBlock {
    h_ll: Matrix3<f64>,
    g_l: Vector3<f64>,
    /// Coupling to the nav part of each observing state.
    h_sl: Vec<(usize, Matrix9x3)>,
}

impl LandmarkBlock {
    fn coupling(&mut self, slot: usize) -> &mut Matrix9x3 {
        let k = match self.h_sl.iter().position(|(s, _)| *s == slot) {
            Some(k) => k,
            None => {
                self.h_sl.push((slot, Matrix9x3::zeros()));
                self.h_sl.len() - 1
            }
        };
        &mut self.h_sl[k].1
    }
}

/// Gauss-Newton normal equations `H dx = -g` split into a dense state part
/// and per-landmark blocks.
#[derive(Clone, Debug)]
pub struct NormalEquations {
    pub n_states: usize,
    pub h_ss: DMatrix<f64>,
    pub g_s: DVector<f64>,
    landmarks: Vec<LandmarkBlock>,
    pub cost: f64,
}

impl NormalEquations {
    pub fn assemble(factors: &[LinearFactor], n_states: usize, n_landmarks: usize) -> Self {
        let n = STATE_DIM * n_states;
        let mut h_ss = DMatrix::zeros(n, n);
        let mut g_s = DVector::zeros(n);
        let mut landmarks = vec![LandmarkBlock::default(); n_landmarks];
        let mut cost = 0.0;
        for f in factors {
            cost += f.cost();
            match f {
                LinearFactor::Dense { blocks, r, .. } => {
                    for (a, ba) in blocks {
                        let mut g = g_s.rows_mut(STATE_DIM * a, STATE_DIM);
                        g += ba.transpose() * r;
                        for (b, bb) in blocks {
                            let mut h = h_ss.view_mut((STATE_DIM * a, STATE_DIM * b), (STATE_DIM, STATE_DIM));
                            h += ba.transpose() * bb;
                        }
                    }
                }
                LinearFactor::Projection { observer, anchor, landmark, j_obs, j_anc, j_lm, r, .. } => {
                    let lm = &mut landmarks[*landmark];
                    lm.h_ll += j_lm.transpose() * j_lm;
                    lm.g_l += j_lm.transpose() * r;
                    let pairs = [(*observer, j_obs), (*anchor, j_anc)];
                    for (a, ja) in pairs {
                        *lm.coupling(a) += ja.transpose() * j_lm;
                        let mut g = g_s.fixed_rows_mut::<9>(STATE_DIM * a);
                        g += ja.transpose() * r;
                        for (b, jb) in pairs {
                            let mut h = h_ss.fixed_view_mut::<9, 9>(STATE_DIM * a, STATE_DIM * b);
                            h += ja.transpose() * jb;
                        }
                    }
                }
            }
        }
        NormalEquations { n_states, h_ss, g_s, landmarks, cost }
    }

    pub fn n_landmarks(&self) -> usize {
        self.landmarks.len()
    }

    /// State-only system after eliminating every landmark, with `lambda`
    /// added to the whole diagonal.
    pub fn reduce(&self, lambda: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let mut h = self.h_ss.clone();
        let mut g = self.g_s.clone();
        for k in 0..h.nrows() {
            h[(k, k)] += lambda;
        }
        for lm in &self.landmarks {
            let inv = (lm.h_ll + Matrix3::identity() * lambda)
                .try_inverse()
                .ok_or(Error::IndefiniteNormalEquations { escalations: 0 })?;
            for (a, ha) in &lm.h_sl {
                let t = ha * inv;
                let mut ga = g.fixed_rows_mut::<9>(STATE_DIM * a);
                ga -= t * lm.g_l;
                for (b, hb) in &lm.h_sl {
                    let mut hab = h.fixed_view_mut::<9, 9>(STATE_DIM * a, STATE_DIM * b);
                    hab -= t * hb.transpose();
                }
            }
        }
        Ok((h, g))
    }

    /// Landmark steps given the state step of the reduced system.
    pub fn back_substitute(&self, lambda: f64, dx: &DVector<f64>) -> Vec<Vector3<f64>> {
        self.landmarks
            .iter()
            .map(|lm| {
                let mut rhs = -lm.g_l;
                for (a, ha) in &lm.h_sl {
                    rhs -= ha.transpose() * dx.fixed_rows::<9>(STATE_DIM * a);
                }
                (lm.h_ll + Matrix3::identity() * lambda)
                    .try_inverse()
                    .map(|inv| inv * rhs)
                    .unwrap_or_else(Vector3::zeros)
            })
            .collect()
    }

    /// Damped step: returns `(state step, landmark steps)`.
    pub fn solve(&self, lambda: f64) -> Result<(DVector<f64>, Vec<Vector3<f64>>)> {
        let (h, g) = self.reduce(lambda)?;
        let chol = h.cholesky().ok_or(Error::IndefiniteNormalEquations { escalations: 0 })?;
        let dx = -chol.solve(&g);
        if dx.iter().any(|v| !v.is_finite()) {
            return Err(Error::IndefiniteNormalEquations { escalations: 0 });
        }
        let dl = self.back_substitute(lambda, &dx);
        Ok((dx, dl))
    }
}

/// Inverse of a symmetric positive semidefinite matrix after adding
/// `floor * I`.
pub fn regularized_inverse(h: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let n = h.nrows();
    let m = h + DMatrix::identity(n, n) * floor;
    match m.clone().cholesky() {
        Some(c) => c.inverse(),
        None => {
            let eig = SymmetricEigen::new(m);
            let d = eig.eigenvalues.map(|l| if l > floor * 0.5 { 1.0 / l } else { 1.0 / floor });
            &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
        }
    }
}

/// Square-root form `(J, r)` of the quadratic `dx' S dx + 2 g' dx`: the
/// rows satisfy `J' J = S` and `J' r = g` on the retained eigenspace.
///
/// The eigen-decomposition runs on `D S D` with `D = diag(S)^-1/2`, so
/// directions with little information keep their relative accuracy when
/// the diagonal spans many orders of magnitude.
pub fn square_root_form(s: &DMatrix<f64>, g: &DVector<f64>, rel_tol: f64) -> (DMatrix<f64>, DVector<f64>) {
    let n = s.nrows();
    let d = DVector::from_fn(n, |i, _| if s[(i, i)] > 0.0 { 1.0 / s[(i, i)].sqrt() } else { 1.0 });
    let scaled = DMatrix::from_fn(n, n, |i, j| 0.5 * (s[(i, j)] + s[(j, i)]) * d[i] * d[j]);
    let eig = SymmetricEigen::new(scaled);
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&k| eig.eigenvalues[k] > rel_tol * max && eig.eigenvalues[k] > 0.0)
        .collect();
    let dg = g.component_mul(&d);
    let mut j = DMatrix::zeros(keep.len(), n);
    let mut r = DVector::zeros(keep.len());
    for (row, &k) in keep.iter().enumerate() {
        let l = eig.eigenvalues[k];
        let u = eig.eigenvectors.column(k);
        for c in 0..n {
            j[(row, c)] = u[c] * l.sqrt() / d[c];
        }
        r[row] = u.dot(&dg) / l.sqrt();
    }
    (j, r)
}

/// Schur complement of the leading `m` variables out of `(H, g)`.
pub fn schur_complement(h: &DMatrix<f64>, g: &DVector<f64>, m: usize) -> (DMatrix<f64>, DVector<f64>) {
    let n = h.nrows();
    let b = n - m;
    let h_mm = h.view((0, 0), (m, m)).into_owned();
    let h_bm = h.view((m, 0), (b, m)).into_owned();
    let h_bb = h.view((m, m), (b, b)).into_owned();
    let g_m = g.rows(0, m).into_owned();
    let g_b = g.rows(m, b).into_owned();
    // Factor the diagonally scaled block; only regularize when it is
    // singular.
    let d = DVector::from_fn(m, |i, _| if h_mm[(i, i)] > 0.0 { 1.0 / h_mm[(i, i)].sqrt() } else { 1.0 });
    let a = DMatrix::from_fn(m, m, |i, j| h_mm[(i, j)] * d[i] * d[j]);
    let mut rhs = DMatrix::zeros(m, b + 1);
    for i in 0..m {
        for j in 0..b {
            rhs[(i, j)] = h_bm[(j, i)] * d[i];
        }
        rhs[(i, b)] = g_m[i] * d[i];
    }
    let mut x = match a.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => regularized_inverse(&a, 1e-14) * rhs,
    };
    for i in 0..m {
        x.row_mut(i).scale_mut(d[i]);
    }
    // x = H_mm^-1 [H_mb, g_m]
    let t = &h_bm * x;
    (h_bb - t.columns(0, b), g_b - t.column(b))
}
