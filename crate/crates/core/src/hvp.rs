//! Matrix-free curvature products for the factor model.
//!
//! With `h_(u,i)(y) = <y_u, y_i>` the Jacobian row of entry `(u,i)` holds `y_i`
//! in the user-`u` slots and `y_u` in the item-`i` slots. The Gauss-Newton
//! product `J^T (J v)` is evaluated with two passes over the observed entries
//! and never materializes `J`. The full damped operator is
//!
//! ```text
//! c(v) = J^T J v + lambda * D v + eta * v
//! ```
//!
//! where `D` repeats `|R_{K_u}|` (resp. `|R_{K_i}|`) over the `f` slots of each
//! row, and `eta` is either `M * ||g||` (cubic mode) or a fixed `gamma`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::HdiMatrix;
use crate::model::{FlatVector, LatentState, ModelError};

/// Largest side the dense oracle will materialize.
pub const ORACLE_MAX_SIDE: usize = 512;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum HvpError {
    #[error("vector length {found} does not match expected {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("damping must be finite and non-negative, got {0}")]
    InvalidDamping(f64),
    #[error("dense oracle side {side} exceeds {ORACLE_MAX_SIDE}")]
    OracleTooLarge { side: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, HvpError>;

/// One value per observed entry, aligned with `HdiMatrix::entries`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryValues(pub Vec<f64>);

impl EntryValues {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &EntryValues) -> f64 {
        crate::model::dot(&self.0, &other.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DampingMode {
    /// `eta = coefficient * ||g||`
    Cubic { coefficient: f64 },
    /// `eta = gamma`
    Fixed { gamma: f64 },
}

/// Damping for one outer epoch. The gradient norm is a snapshot taken before
/// the inner solve and stays fixed across its CG iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DampingSpec {
    pub reg_strength: f64,
    pub mode: DampingMode,
    pub gradient_norm: f64,
}

impl DampingSpec {
    pub fn cubic(reg_strength: f64, coefficient: f64, gradient_norm: f64) -> Self {
        Self {
            reg_strength,
            mode: DampingMode::Cubic { coefficient },
            gradient_norm,
        }
    }

    pub fn fixed(reg_strength: f64, gamma: f64) -> Self {
        Self {
            reg_strength,
            mode: DampingMode::Fixed { gamma },
            gradient_norm: 0.0,
        }
    }

    /// The multiplier of the identity term.
    pub fn eta(&self) -> f64 {
        match self.mode {
            DampingMode::Cubic { coefficient } => coefficient * self.gradient_norm,
            DampingMode::Fixed { gamma } => gamma,
        }
    }

    pub fn validate(&self) -> Result<f64> {
        if !(self.reg_strength.is_finite() && self.reg_strength >= 0.0) {
            return Err(HvpError::InvalidDamping(self.reg_strength));
        }
        if !(self.gradient_norm.is_finite() && self.gradient_norm >= 0.0) {
            return Err(HvpError::InvalidDamping(self.gradient_norm));
        }
        let eta = self.eta();
        if !(eta.is_finite() && eta >= 0.0) {
            return Err(HvpError::InvalidDamping(eta));
        }
        Ok(eta)
    }
}

fn check_len(state: &LatentState, found: usize) -> Result<()> {
    let expected = state.params().len();
    if found != expected {
        return Err(HvpError::LengthMismatch { expected, found });
    }
    Ok(())
}

/// Pass 1: `(J v)_(u,i) = sum_d (v_ud * y_id + y_ud * v_id)`.
fn jv_pass(state: &LatentState, matrix: &HdiMatrix, v: &[f64], out: &mut [f64]) -> u64 {
    let f = state.rank();
    let y = state.params().as_slice();
    let item_base = state.num_users() * f;
    let mut touched = 0u64;
    for (slot, e) in out.iter_mut().zip(matrix.entries()) {
        let uo = e.user * f;
        let io = item_base + e.item * f;
        let mut acc = 0.0;
        for d in 0..f {
            acc += v[uo + d] * y[io + d] + y[uo + d] * v[io + d];
        }
        *slot = acc;
        touched += 1;
    }
    touched
}

/// Pass 2: accumulates `J^T w` into `out` (not zeroed here).
fn jtw_pass(state: &LatentState, matrix: &HdiMatrix, w: &[f64], out: &mut [f64]) -> u64 {
    let f = state.rank();
    let y = state.params().as_slice();
    let item_base = state.num_users() * f;
    let mut touched = 0u64;
    for (&wk, e) in w.iter().zip(matrix.entries()) {
        let uo = e.user * f;
        let io = item_base + e.item * f;
        for d in 0..f {
            out[uo + d] += wk * y[io + d];
            out[io + d] += wk * y[uo + d];
        }
        touched += 1;
    }
    touched
}

/// Adds `lambda * D v + eta * v` into `out`.
fn add_diagonal(matrix: &HdiMatrix, f: usize, lambda: f64, eta: f64, v: &[f64], out: &mut [f64]) {
    let nu = matrix.num_users();
    for u in 0..nu {
        let scale = lambda * matrix.user_count(u) as f64 + eta;
        for k in u * f..(u + 1) * f {
            out[k] += scale * v[k];
        }
    }
    for i in 0..matrix.num_items() {
        let scale = lambda * matrix.item_count(i) as f64 + eta;
        for k in (nu + i) * f..(nu + i + 1) * f {
            out[k] += scale * v[k];
        }
    }
}

pub fn jacobian_vector(state: &LatentState, matrix: &HdiMatrix, v: &FlatVector) -> Result<EntryValues> {
    state.check_matrix(matrix)?;
    check_len(state, v.len())?;
    let mut out = vec![0.0; matrix.len()];
    jv_pass(state, matrix, v.as_slice(), &mut out);
    Ok(EntryValues(out))
}

pub fn jacobian_transpose_vector(state: &LatentState, matrix: &HdiMatrix, w: &EntryValues) -> Result<FlatVector> {
    state.check_matrix(matrix)?;
    if w.0.len() != matrix.len() {
        return Err(HvpError::LengthMismatch {
            expected: matrix.len(),
            found: w.0.len(),
        });
    }
    let mut out = state.params().zeros_like();
    jtw_pass(state, matrix, &w.0, out.as_mut_slice());
    Ok(out)
}

/// `G v = J^T (J v)`
pub fn gauss_newton_vector(state: &LatentState, matrix: &HdiMatrix, v: &FlatVector) -> Result<FlatVector> {
    let jv = jacobian_vector(state, matrix, v)?;
    jacobian_transpose_vector(state, matrix, &jv)
}

/// `(G + lambda * D + eta * I) v`
pub fn regularized_hvp(
    state: &LatentState,
    matrix: &HdiMatrix,
    v: &FlatVector,
    damping: &DampingSpec,
) -> Result<FlatVector> {
    state.check_matrix(matrix)?;
    check_len(state, v.len())?;
    let mut op = CurvatureOperator::new(state, matrix, *damping)?;
    let mut out = state.params().zeros_like();
    op.apply(v.as_slice(), out.as_mut_slice());
    Ok(out)
}

/// Reusable damped curvature operator for one outer epoch. Holds the pass-1
/// scratch buffer and counts entry visits.
#[derive(Debug)]
pub struct CurvatureOperator<'a> {
    state: &'a LatentState,
    matrix: &'a HdiMatrix,
    lambda: f64,
    eta: f64,
    scratch: Vec<f64>,
    applications: u64,
    entry_touches: u64,
}

impl<'a> CurvatureOperator<'a> {
    pub fn new(state: &'a LatentState, matrix: &'a HdiMatrix, damping: DampingSpec) -> Result<Self> {
        state.check_matrix(matrix)?;
        let eta = damping.validate()?;
        Ok(Self {
            state,
            matrix,
            lambda: damping.reg_strength,
            eta,
            scratch: vec![0.0; matrix.len()],
            applications: 0,
            entry_touches: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.state.params().len()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Writes `c(v)` into `out`.
    ///
    /// # Panics
    /// If `v` or `out` does not have length [`dim`](Self::dim).
    pub fn apply(&mut self, v: &[f64], out: &mut [f64]) {
        assert_eq!(v.len(), self.dim(), "operand length");
        assert_eq!(out.len(), self.dim(), "output length");
        out.fill(0.0);
        self.entry_touches += jv_pass(self.state, self.matrix, v, &mut self.scratch);
        self.entry_touches += jtw_pass(self.state, self.matrix, &self.scratch, out);
        add_diagonal(self.matrix, self.state.rank(), self.lambda, self.eta, v, out);
        self.applications += 1;
    }

    pub fn applications(&self) -> u64 {
        self.applications
    }

    /// Observed-entry visits so far, two per application.
    pub fn entry_touches(&self) -> u64 {
        self.entry_touches
    }
}

/// Dense `J^T J + lambda * D + eta * I`, built from explicit Jacobian rows.
/// For tests and small problems only.
pub fn dense_curvature_oracle(
    state: &LatentState,
    matrix: &HdiMatrix,
    damping: &DampingSpec,
) -> Result<DMatrix<f64>> {
    state.check_matrix(matrix)?;
    let side = state.params().len();
    if side > ORACLE_MAX_SIDE {
        return Err(HvpError::OracleTooLarge { side });
    }
    let eta = damping.validate()?;
    let f = state.rank();
    let nu = state.num_users();

    let mut jac = DMatrix::<f64>::zeros(matrix.len(), side);
    for (row, e) in matrix.entries().iter().enumerate() {
        for d in 0..f {
            jac[(row, e.user * f + d)] = state.item(e.item)[d];
            jac[(row, (nu + e.item) * f + d)] = state.user(e.user)[d];
        }
    }
    let mut curvature = jac.transpose() * &jac;
    for u in 0..nu {
        for d in 0..f {
            let k = u * f + d;
            curvature[(k, k)] += damping.reg_strength * matrix.user_count(u) as f64 + eta;
        }
    }
    for i in 0..state.num_items() {
        for d in 0..f {
            let k = (nu + i) * f + d;
            curvature[(k, k)] += damping.reg_strength * matrix.item_count(i) as f64 + eta;
        }
    }
    Ok(curvature)
}
