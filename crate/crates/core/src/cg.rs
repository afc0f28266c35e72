//! Matrix-free conjugate gradient for symmetric positive definite systems.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{dot, norm};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CgError {
    #[error("max_iterations must be at least 1")]
    ZeroIterations,
    #[error("relative tolerance must be positive and finite, got {0}")]
    InvalidTolerance(f64),
    #[error("length mismatch: right-hand side {rhs}, start {start}")]
    LengthMismatch { rhs: usize, start: usize },
    #[error("non-finite value at CG iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("operator not positive definite at CG iteration {iteration}: <p, Ap> = {curvature:e}")]
    Indefinite { iteration: usize, curvature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgConfig {
    /// `T_CG`
    pub max_iterations: usize,
    /// Stop once `||r|| <= rel_tolerance * ||b||`.
    pub rel_tolerance: f64,
    /// Right-hand sides with `||b||` at or below this are treated as zero.
    pub abs_floor: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            rel_tolerance: 1e-2,
            abs_floor: 1e-300,
        }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<(), CgError> {
        if self.max_iterations == 0 {
            return Err(CgError::ZeroIterations);
        }
        if !(self.rel_tolerance.is_finite() && self.rel_tolerance > 0.0) {
            return Err(CgError::InvalidTolerance(self.rel_tolerance));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub increment: Vec<f64>,
    pub iterations_used: usize,
    pub final_residual_norm: f64,
    pub rhs_norm: f64,
    pub converged: bool,
}

/// Solves `A x = b` from `x0 = 0`, so the first search direction is `b`.
pub fn solve<F>(apply: F, b: &[f64], config: &CgConfig) -> Result<CgOutcome, CgError>
where
    F: FnMut(&[f64], &mut [f64]),
{
    solve_from(apply, b, None, config)
}

/// As [`solve`], optionally warm-started from `start`. A warm start spends
/// one extra `apply` on the initial residual.
pub fn solve_from<F>(mut apply: F, b: &[f64], start: Option<&[f64]>, config: &CgConfig) -> Result<CgOutcome, CgError>
where
    F: FnMut(&[f64], &mut [f64]),
{
    config.validate()?;
    let n = b.len();
    let rhs_norm = norm(b);
    if !rhs_norm.is_finite() {
        return Err(CgError::NonFinite { iteration: 0 });
    }
    if rhs_norm <= config.abs_floor {
        return Ok(CgOutcome {
            increment: vec![0.0; n],
            iterations_used: 0,
            final_residual_norm: rhs_norm,
            rhs_norm,
            converged: true,
        });
    }
    let target = config.rel_tolerance * rhs_norm;

    let mut ap = vec![0.0; n];
    let (mut x, mut r) = match start {
        Some(x0) => {
            if x0.len() != n {
                return Err(CgError::LengthMismatch { rhs: n, start: x0.len() });
            }
            apply(x0, &mut ap);
            let r: Vec<f64> = b.iter().zip(&ap).map(|(bi, ai)| bi - ai).collect();
            (x0.to_vec(), r)
        }
        None => (vec![0.0; n], b.to_vec()),
    };
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    if !rr.is_finite() {
        return Err(CgError::NonFinite { iteration: 0 });
    }

    let mut iterations = 0;
    while rr.sqrt() > target && iterations < config.max_iterations {
        apply(&p, &mut ap);
        iterations += 1;
        let curvature = dot(&p, &ap);
        if !curvature.is_finite() {
            return Err(CgError::NonFinite { iteration: iterations });
        }
        if curvature <= 0.0 {
            return Err(CgError::Indefinite {
                iteration: iterations,
                curvature,
            });
        }
        let alpha = rr / curvature;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rr_next = dot(&r, &r);
        if !rr_next.is_finite() {
            return Err(CgError::NonFinite { iteration: iterations });
        }
        let beta = rr_next / rr;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
        rr = rr_next;
    }

    let final_residual_norm = rr.sqrt();
    Ok(CgOutcome {
        increment: x,
        iterations_used: iterations,
        final_residual_norm,
        rhs_norm,
        converged: final_residual_norm <= target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        a.transpose() * &a / n as f64 + DMatrix::identity(n, n) * 0.5
    }

    fn dense_apply(a: &DMatrix<f64>) -> impl FnMut(&[f64], &mut [f64]) + '_ {
        move |v, out| {
            let r = a * DVector::from_column_slice(v);
            out.copy_from_slice(r.as_slice());
        }
    }

    #[test]
    fn identity_one_iteration() {
        let b = vec![1.0, -2.0, 3.5];
        let out = solve(|v, o| o.copy_from_slice(v), &b, &CgConfig::default()).unwrap();
        assert_eq!(out.iterations_used, 1);
        assert_eq!(out.increment, b);
        assert!(out.converged);
    }

    #[test]
    fn zero_rhs() {
        let mut calls = 0;
        let out = solve(
            |v, o| {
                calls += 1;
                o.copy_from_slice(v)
            },
            &[0.0; 4],
            &CgConfig::default(),
        )
        .unwrap();
        assert_eq!(out.iterations_used, 0);
        assert_eq!(out.increment, vec![0.0; 4]);
        assert_eq!(calls, 0);
    }

    #[test]
    fn matches_dense_solve_12() {
        let a = random_spd(12, 5);
        let b: Vec<f64> = (0..12).map(|k| (k as f64).sin()).collect();
        let cfg = CgConfig { max_iterations: 12, rel_tolerance: 1e-12, ..CgConfig::default() };
        let out = solve(dense_apply(&a), &b, &cfg).unwrap();
        let direct = a.clone().cholesky().unwrap().solve(&DVector::from_column_slice(&b));
        let err = (DVector::from_column_slice(&out.increment) - &direct).norm() / direct.norm();
        assert!(err < 1e-8, "rel err {err}");
        assert!(out.iterations_used <= 12);
    }

    #[test]
    fn counts_applications() {
        let a = random_spd(20, 6);
        let b = vec![1.0; 20];
        let mut calls = 0usize;
        let mut inner = dense_apply(&a);
        let cfg = CgConfig { max_iterations: 7, rel_tolerance: 1e-30, ..CgConfig::default() };
        let out = solve(
            |v, o| {
                calls += 1;
                inner(v, o)
            },
            &b,
            &cfg,
        )
        .unwrap();
        assert_eq!(out.iterations_used, 7);
        assert_eq!(calls, 7);
        assert!(!out.converged);
    }

    #[test]
    fn indefinite_aborts() {
        let err = solve(|v, o| o.iter_mut().zip(v).for_each(|(o, v)| *o = -v), &[1.0, 1.0], &CgConfig::default())
            .unwrap_err();
        assert!(matches!(err, CgError::Indefinite { iteration: 1, .. }));
    }

    #[test]
    fn non_finite_aborts() {
        let err = solve(|_, o| o.fill(f64::NAN), &[1.0], &CgConfig::default()).unwrap_err();
        assert_eq!(err, CgError::NonFinite { iteration: 1 });
        let err = solve(|v, o| o.copy_from_slice(v), &[f64::INFINITY], &CgConfig::default()).unwrap_err();
        assert_eq!(err, CgError::NonFinite { iteration: 0 });
    }

    #[test]
    fn config_validation() {
        let bad = CgConfig { max_iterations: 0, ..CgConfig::default() };
        assert_eq!(solve(|v, o| o.copy_from_slice(v), &[1.0], &bad).unwrap_err(), CgError::ZeroIterations);
        let bad = CgConfig { rel_tolerance: 0.0, ..CgConfig::default() };
        assert!(matches!(solve(|v, o| o.copy_from_slice(v), &[1.0], &bad), Err(CgError::InvalidTolerance(_))));
    }

    #[test]
    fn warm_start_at_solution_needs_no_iterations() {
        let a = random_spd(8, 9);
        let x: Vec<f64> = (0..8).map(|k| k as f64 - 3.0).collect();
        let b = (&a * DVector::from_column_slice(&x)).as_slice().to_vec();
        let out = solve_from(dense_apply(&a), &b, Some(&x), &CgConfig::default()).unwrap();
        assert_eq!(out.iterations_used, 0);
        assert!(out.converged);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn terminates_within_n(n in 1usize..=64, seed in any::<u64>()) {
            let a = random_spd(n, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cfg = CgConfig { max_iterations: n, rel_tolerance: 1e-10, ..CgConfig::default() };
            let out = solve(dense_apply(&a), &b, &cfg).unwrap();
            prop_assert!(out.iterations_used <= n);
            prop_assert!(out.final_residual_norm <= out.rhs_norm);
            let true_res = (&a * DVector::from_column_slice(&out.increment) - DVector::from_column_slice(&b)).norm();
            prop_assert!(true_res <= 1e-8 * out.rhs_norm.max(1.0), "residual {}", true_res);
        }
    }
}
