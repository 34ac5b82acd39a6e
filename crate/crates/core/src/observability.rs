//! Nullity audit of the stacked whitened Jacobian against the four gauge
//! directions (yaw about gravity, global translation).

use nalgebra::{DMatrix, DVector, SMatrix, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linear::FactorId;
use crate::smoother::Smoother;
use crate::state::{nullspace_block, ErrorFormulation, SystemState, STATE_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variable {
    State(usize),
    Landmark(usize),
}

impl Variable {
    pub fn dim(&self) -> usize {
        match self {
            Variable::State(_) => STATE_DIM,
            Variable::Landmark(_) => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub frame: usize,
    pub latest: SystemState,
    pub first_estimate: Option<SystemState>,
}

/// Rows of one factor. `blocks` pair a column-variable index with the
/// rows' Jacobian block for that variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub factor: FactorId,
    pub frozen: bool,
    pub blocks: Vec<(usize, DMatrix<f64>)>,
    pub residual: DVector<f64>,
    /// Linearization points of frozen rows, by frame.
    pub lin_points: Vec<(usize, SystemState)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianTrace {
    pub formulation: ErrorFormulation,
    pub step: usize,
    pub marginalizations: usize,
    pub columns: Vec<Variable>,
    /// Snapshots of the state columns, in column order.
    pub states: Vec<StateSnapshot>,
    pub rows: Vec<TraceRow>,
}

impl JacobianTrace {
    pub fn offsets(&self) -> Vec<usize> {
        let mut at = 0;
        self.columns
            .iter()
            .map(|c| {
                let o = at;
                at += c.dim();
                o
            })
            .collect()
    }

    pub fn ncols(&self) -> usize {
        self.columns.iter().map(|c| c.dim()).sum()
    }

    pub fn nrows(&self) -> usize {
        self.rows.iter().map(|r| r.residual.len()).sum()
    }

    /// Dense stacked Jacobian.
    pub fn dense(&self) -> DMatrix<f64> {
        let offsets = self.offsets();
        let mut j = DMatrix::zeros(self.nrows(), self.ncols());
        let mut at = 0;
        for row in &self.rows {
            let n = row.residual.len();
            for (c, b) in &row.blocks {
                let mut v = j.view_mut((at, offsets[*c]), (n, b.ncols()));
                v += b;
            }
            at += n;
        }
        j
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NullspaceEval {
    Latest,
    /// First estimates where recorded, latest values otherwise.
    FirstEstimates,
}

fn state_point(s: &StateSnapshot, mode: NullspaceEval) -> &SystemState {
    match (mode, &s.first_estimate) {
        (NullspaceEval::FirstEstimates, Some(fe)) => fe,
        _ => &s.latest,
    }
}

/// Per-column nullspace blocks: 15x4 for states, zero for landmarks.
fn blocks(trace: &JacobianTrace, mode: NullspaceEval) -> Vec<Option<SMatrix<f64, 15, 4>>> {
    let mut k = 0;
    trace
        .columns
        .iter()
        .map(|c| match c {
            Variable::State(_) => {
                let s = &trace.states[k];
                k += 1;
                Some(nullspace_block(trace.formulation, state_point(s, mode)))
            }
            Variable::Landmark(_) => None,
        })
        .collect()
}

/// Stacked `N_J` over the trace's columns.
pub fn build_nullspace(trace: &JacobianTrace, mode: NullspaceEval) -> DMatrix<f64> {
    let offsets = trace.offsets();
    let mut n = DMatrix::zeros(trace.ncols(), 4);
    for (c, b) in blocks(trace, mode).iter().enumerate() {
        if let Some(b) = b {
            n.view_mut((offsets[c], 0), (STATE_DIM, 4)).copy_from(b);
        }
    }
    n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullityReport {
    /// `|J n_c| / |J|_F` for the yaw column and the three translations.
    pub per_column_defect: [f64; 4],
    /// Worst rows first, as `(factor, |J_row N| / |J|_F)`.
    pub per_row_worst: Vec<(FactorId, f64)>,
    /// `n_c' J' J n_c` per column.
    pub spurious_info: [f64; 4],
}

impl NullityReport {
    pub fn max_defect(&self) -> f64 {
        self.per_column_defect.iter().cloned().fold(0.0, f64::max)
    }
}

const WORST_ROWS: usize = 10;

/// Audit with `N_J` at first estimates where recorded.
pub fn nullity_audit(trace: &JacobianTrace) -> NullityReport {
    nullity_audit_with(trace, NullspaceEval::FirstEstimates)
}

pub fn nullity_audit_with(trace: &JacobianTrace, mode: NullspaceEval) -> NullityReport {
    let nb = blocks(trace, mode);
    let mut col_sq = Vector4::<f64>::zeros();
    let mut frob_sq = 0.0;
    let mut per_row = Vec::with_capacity(trace.rows.len());
    for row in &trace.rows {
        let n = row.residual.len();
        let mut jn = DMatrix::zeros(n, 4);
        for (c, b) in &row.blocks {
            frob_sq += b.norm_squared();
            if let Some(nc) = &nb[*c] {
                jn += b * nc;
            }
        }
        for k in 0..4 {
            col_sq[k] += jn.column(k).norm_squared();
        }
        per_row.push((row.factor.clone(), jn.norm()));
    }
    let frob = frob_sq.sqrt();
    let scale = if frob > 0.0 { 1.0 / frob } else { 0.0 };
    let mut per_row_worst: Vec<(FactorId, f64)> = per_row.into_iter().map(|(id, d)| (id, d * scale)).collect();
    per_row_worst.sort_by(|a, b| b.1.total_cmp(&a.1));
    per_row_worst.truncate(WORST_ROWS);
    NullityReport {
        per_column_defect: [0, 1, 2, 3].map(|k| col_sq[k].sqrt() * scale),
        per_row_worst,
        spurious_info: [0, 1, 2, 3].map(|k| col_sq[k]),
    }
}

/// Largest change in the per-column defects after perturbing every bias
/// and landmark by `fraction` of its magnitude. Biases close to zero are
/// perturbed relative to `bias_scale = (gyro, accel)` instead.
pub fn local_param_irrelevance_check(
    smoother: &Smoother,
    fraction: f64,
    bias_scale: (f64, f64),
    seed: u64,
) -> Result<f64> {
    let base = nullity_audit(&smoother.jacobian_trace(0)?);
    let mut sm = smoother.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |v: f64, scale: f64| v + fraction * v.abs().max(scale) * rng.random_range(-1.0..1.0);
    for (frame, x) in smoother.states() {
        let mut y = x;
        for k in 0..3 {
            y.bias_g[k] = jitter(x.bias_g[k], bias_scale.0);
            y.bias_a[k] = jitter(x.bias_a[k], bias_scale.1);
        }
        sm.set_state(frame, y);
    }
    for (key, f, _) in smoother.landmarks() {
        let mut g = f;
        g.alpha = jitter(f.alpha, 0.0);
        g.beta = jitter(f.beta, 0.0);
        g.rho = jitter(f.rho, 0.0);
        sm.set_landmark(key, g);
    }
    let after = nullity_audit(&sm.jacobian_trace(0)?);
    Ok((0..4)
        .map(|k| (after.per_column_defect[k] - base.per_column_defect[k]).abs())
        .fold(0.0, f64::max))
}
