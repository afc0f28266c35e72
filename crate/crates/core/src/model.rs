//! Latent factors, the regularized squared-error objective, its gradient and
//! RMSE.
//!
//! The regularizer is charged once per observed entry, so a user factor is
//! penalized `|R_{K_u}|` times:
//!
//! ```text
//! E(y) = 1/2 * sum_{(u,i) in R_K} [ (r_ui - <y_u, y_i>)^2 + lambda * (|y_u|^2 + |y_i|^2) ]
//! ```

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{HdiMatrix, RatingTriple};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelError {
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("initialization bound must be positive and finite, got {0}")]
    InvalidInitBound(f64),
    #[error("regularization strength must be finite and non-negative, got {0}")]
    InvalidRegularization(f64),
    #[error("factor values must be finite")]
    NonFiniteFactor,
    #[error("vector length {found} does not match (|U| + |I|) * f = {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("state is {state_users} x {state_items} but matrix is {matrix_users} x {matrix_items}")]
    DimensionMismatch {
        state_users: usize,
        state_items: usize,
        matrix_users: usize,
        matrix_items: usize,
    },
    #[error("user {user} or item {item} out of range ({num_users} x {num_items})")]
    IndexOutOfRange {
        user: usize,
        item: usize,
        num_users: usize,
        num_items: usize,
    },
    #[error("evaluation set is empty")]
    EmptyEvalSet,
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// A vector laid out like `vec(Y_U, Y_I)`: all user rows (row-major, `f` per
/// user) followed by all item rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatVector {
    values: Vec<f64>,
    num_users: usize,
    num_items: usize,
    rank: usize,
}

impl FlatVector {
    pub fn zeros(num_users: usize, num_items: usize, rank: usize) -> Self {
        Self {
            values: vec![0.0; (num_users + num_items) * rank],
            num_users,
            num_items,
            rank,
        }
    }

    pub fn from_values(values: Vec<f64>, num_users: usize, num_items: usize, rank: usize) -> Result<Self> {
        let expected = (num_users + num_items) * rank;
        if values.len() != expected {
            return Err(ModelError::LengthMismatch {
                expected,
                found: values.len(),
            });
        }
        Ok(Self {
            values,
            num_users,
            num_items,
            rank,
        })
    }

    /// Zero vector with the same layout.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.num_users, self.num_items, self.rank)
    }

    /// Same layout, new contents.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::from_values(values, self.num_users, self.num_items, self.rank)
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn user_block(&self) -> &[f64] {
        &self.values[..self.num_users * self.rank]
    }

    pub fn item_block(&self) -> &[f64] {
        &self.values[self.num_users * self.rank..]
    }

    pub fn user(&self, u: usize) -> &[f64] {
        &self.values[u * self.rank..(u + 1) * self.rank]
    }

    pub fn item(&self, i: usize) -> &[f64] {
        let start = (self.num_users + i) * self.rank;
        &self.values[start..start + self.rank]
    }

    pub fn user_mut(&mut self, u: usize) -> &mut [f64] {
        &mut self.values[u * self.rank..(u + 1) * self.rank]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f64] {
        let start = (self.num_users + i) * self.rank;
        &mut self.values[start..start + self.rank]
    }

    /// Offset of item `i`'s first slot in the flat layout.
    pub fn item_offset(&self, i: usize) -> usize {
        (self.num_users + i) * self.rank
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn dot(&self, other: &FlatVector) -> f64 {
        dot(&self.values, &other.values)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Trainable factors `Y_U`, `Y_I` and the regularization strength.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    params: FlatVector,
    reg_strength: f64,
}

impl LatentState {
    pub fn new(params: FlatVector, reg_strength: f64) -> Result<Self> {
        if params.rank == 0 {
            return Err(ModelError::ZeroRank);
        }
        if !(reg_strength.is_finite() && reg_strength >= 0.0) {
            return Err(ModelError::InvalidRegularization(reg_strength));
        }
        if params.values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteFactor);
        }
        Ok(Self { params, reg_strength })
    }

    pub fn from_factors(
        user_factors: &[f64],
        item_factors: &[f64],
        rank: usize,
        reg_strength: f64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(ModelError::ZeroRank);
        }
        let num_users = user_factors.len() / rank;
        let num_items = item_factors.len() / rank;
        if num_users * rank != user_factors.len() || num_items * rank != item_factors.len() {
            return Err(ModelError::LengthMismatch {
                expected: (num_users + num_items) * rank,
                found: user_factors.len() + item_factors.len(),
            });
        }
        let mut values = user_factors.to_vec();
        values.extend_from_slice(item_factors);
        Self::new(FlatVector::from_values(values, num_users, num_items, rank)?, reg_strength)
    }

    pub fn params(&self) -> &FlatVector {
        &self.params
    }

    /// `Y_U` row-major.
    pub fn user_factors(&self) -> &[f64] {
        self.params.user_block()
    }

    /// `Y_I` row-major.
    pub fn item_factors(&self) -> &[f64] {
        self.params.item_block()
    }

    pub fn user(&self, u: usize) -> &[f64] {
        self.params.user(u)
    }

    pub fn item(&self, i: usize) -> &[f64] {
        self.params.item(i)
    }

    pub fn rank(&self) -> usize {
        self.params.rank
    }

    pub fn num_users(&self) -> usize {
        self.params.num_users
    }

    pub fn num_items(&self) -> usize {
        self.params.num_items
    }

    pub fn reg_strength(&self) -> f64 {
        self.reg_strength
    }

    /// Returns `y + delta`, rejecting non-finite results.
    pub fn shifted(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != self.params.len() {
            return Err(ModelError::LengthMismatch {
                expected: self.params.len(),
                found: delta.len(),
            });
        }
        let values: Vec<f64> = self.params.values.iter().zip(delta).map(|(y, d)| y + d).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteFactor);
        }
        Ok(Self {
            params: self.params.with_values(values)?,
            reg_strength: self.reg_strength,
        })
    }

    pub(crate) fn params_mut(&mut self) -> &mut FlatVector {
        &mut self.params
    }

    pub(crate) fn check_matrix(&self, matrix: &HdiMatrix) -> Result<()> {
        if self.num_users() != matrix.num_users() || self.num_items() != matrix.num_items() {
            return Err(ModelError::DimensionMismatch {
                state_users: self.num_users(),
                state_items: self.num_items(),
                matrix_users: matrix.num_users(),
                matrix_items: matrix.num_items(),
            });
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn predict_unchecked(&self, u: usize, i: usize) -> f64 {
        dot(self.user(u), self.item(i))
    }
}

/// Every factor entry drawn independently from `U[0, hi)` by ChaCha8 seeded
/// with `seed`, user block first.
pub fn init_uniform(
    num_users: usize,
    num_items: usize,
    rank: usize,
    hi: f64,
    reg_strength: f64,
    seed: u64,
) -> Result<LatentState> {
    if rank == 0 {
        return Err(ModelError::ZeroRank);
    }
    if !(hi.is_finite() && hi > 0.0) {
        return Err(ModelError::InvalidInitBound(hi));
    }
    let dist = Uniform::new(0.0, hi);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..(num_users + num_items) * rank)
        .map(|_| dist.sample(&mut rng))
        .collect();
    LatentState::new(FlatVector::from_values(values, num_users, num_items, rank)?, reg_strength)
}

/// `<y_u, y_i>`
pub fn predict(state: &LatentState, u: usize, i: usize) -> Result<f64> {
    if u >= state.num_users() || i >= state.num_items() {
        return Err(ModelError::IndexOutOfRange {
            user: u,
            item: i,
            num_users: state.num_users(),
            num_items: state.num_items(),
        });
    }
    Ok(state.predict_unchecked(u, i))
}

pub fn objective(state: &LatentState, matrix: &HdiMatrix) -> Result<f64> {
    state.check_matrix(matrix)?;
    let squared: f64 = matrix
        .entries()
        .iter()
        .map(|e| {
            let residual = e.rating - state.predict_unchecked(e.user, e.item);
            residual * residual
        })
        .sum();
    let lambda = state.reg_strength();
    let mut penalty = 0.0;
    if lambda != 0.0 {
        for u in 0..state.num_users() {
            penalty += matrix.user_count(u) as f64 * dot(state.user(u), state.user(u));
        }
        for i in 0..state.num_items() {
            penalty += matrix.item_count(i) as f64 * dot(state.item(i), state.item(i));
        }
    }
    Ok(0.5 * (squared + lambda * penalty))
}

pub fn gradient(state: &LatentState, matrix: &HdiMatrix) -> Result<FlatVector> {
    state.check_matrix(matrix)?;
    let mut out = state.params().zeros_like();
    gradient_into(state, matrix, &mut out);
    Ok(out)
}

/// Accumulates the gradient into `out` (which must be zeroed) in entry order.
/// Returns the number of observed entries visited.
pub(crate) fn gradient_into(state: &LatentState, matrix: &HdiMatrix, out: &mut FlatVector) -> u64 {
    let f = state.rank();
    let mut touched = 0u64;
    for e in matrix.entries() {
        let yu = state.user(e.user);
        let yi = state.item(e.item);
        let residual = e.rating - dot(yu, yi);
        let io = out.item_offset(e.item);
        let uo = e.user * f;
        let g = out.as_mut_slice();
        for d in 0..f {
            g[uo + d] -= residual * yi[d];
            g[io + d] -= residual * yu[d];
        }
        touched += 1;
    }
    let lambda = state.reg_strength();
    if lambda != 0.0 {
        for u in 0..state.num_users() {
            let scale = lambda * matrix.user_count(u) as f64;
            for (g, y) in out.user_mut(u).iter_mut().zip(state.user(u)) {
                *g += scale * y;
            }
        }
        for i in 0..state.num_items() {
            let scale = lambda * matrix.item_count(i) as f64;
            for (g, y) in out.item_mut(i).iter_mut().zip(state.item(i)) {
                *g += scale * y;
            }
        }
    }
    touched
}

pub fn rmse(state: &LatentState, eval_set: &[RatingTriple]) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(ModelError::EmptyEvalSet);
    }
    let mut sum = 0.0;
    for t in eval_set {
        let residual = t.rating - predict(state, t.user, t.item)?;
        sum += residual * residual;
    }
    Ok((sum / eval_set.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn one_entry(r: f64, yu: f64, yi: f64, lambda: f64) -> (LatentState, HdiMatrix) {
        let s = LatentState::from_factors(&[yu], &[yi], 1, lambda).unwrap();
        let m = HdiMatrix::build(&[RatingTriple::new(0, 0, r)], 1, 1).unwrap();
        (s, m)
    }

    #[test]
    fn init_range_and_mean() {
        let s = init_uniform(300, 200, 200, 0.004, 0.0, 7).unwrap();
        let v = s.params().as_slice();
        assert!(v.len() >= 100_000);
        assert!(v.iter().all(|&x| (0.0..0.004).contains(&x)));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean - 0.002).abs() < 0.0002, "mean {mean}");
    }

    #[test]
    fn init_deterministic_and_sized() {
        let a = init_uniform(6040, 3952, 20, 0.004, 0.02, 1).unwrap();
        let b = init_uniform(6040, 3952, 20, 0.004, 0.02, 1).unwrap();
        assert_eq!(a.params().len(), 199_840);
        assert!(a.params().as_slice().iter().zip(b.params().as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn init_errors() {
        assert_eq!(init_uniform(2, 2, 0, 0.004, 0.0, 1).unwrap_err(), ModelError::ZeroRank);
        assert!(matches!(init_uniform(2, 2, 2, 0.0, 0.0, 1), Err(ModelError::InvalidInitBound(_))));
        assert!(matches!(init_uniform(2, 2, 2, -1.0, 0.0, 1), Err(ModelError::InvalidInitBound(_))));
    }

    #[test]
    fn predict_cases() {
        let s = LatentState::from_factors(&[1.0, 2.0, 0.0, 0.0], &[3.0, 4.0], 2, 0.0).unwrap();
        assert_eq!(predict(&s, 0, 0).unwrap(), 11.0);
        assert_eq!(predict(&s, 1, 0).unwrap(), 0.0);
        assert!(matches!(predict(&s, 2, 0), Err(ModelError::IndexOutOfRange { .. })));
        let a = 1.7;
        let s = LatentState::from_factors(&[a], &[a], 1, 0.0).unwrap();
        assert_eq!(predict(&s, 0, 0).unwrap(), a * a);
    }

    #[test]
    fn objective_cases() {
        let s = LatentState::from_factors(&[0.0], &[0.0], 1, 0.3).unwrap();
        let empty = HdiMatrix::build(&[], 1, 1).unwrap();
        assert_eq!(objective(&s, &empty).unwrap(), 0.0);
        let (s, m) = one_entry(1.0, 0.0, 0.0, 0.7);
        assert_eq!(objective(&s, &m).unwrap(), 0.5);
        let (s, m) = one_entry(2.0, 1.0, 1.0, 0.02);
        assert_relative_eq!(objective(&s, &m).unwrap(), 0.52, max_relative = 1e-15);
    }

    #[test]
    fn regularizer_counted_per_entry() {
        // user 0 rated two items, so ||y_0||^2 is charged twice.
        let s = LatentState::from_factors(&[1.0], &[0.0, 0.0], 1, 1.0).unwrap();
        let m = HdiMatrix::build(&[RatingTriple::new(0, 0, 0.0), RatingTriple::new(0, 1, 0.0)], 1, 2).unwrap();
        assert_eq!(objective(&s, &m).unwrap(), 1.0);
    }

    #[test]
    fn gradient_cases() {
        let (s, m) = one_entry(2.0, 1.0, 1.0, 0.0);
        assert_eq!(gradient(&s, &m).unwrap().as_slice(), &[-1.0, -1.0]);
        let s = LatentState::from_factors(&[0.0; 4], &[0.0; 6], 2, 0.5).unwrap();
        let m = HdiMatrix::build(&[RatingTriple::new(0, 1, 3.0), RatingTriple::new(1, 2, 5.0)], 2, 3).unwrap();
        assert!(gradient(&s, &m).unwrap().as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn dimension_mismatch() {
        let s = LatentState::from_factors(&[0.0], &[0.0], 1, 0.0).unwrap();
        let m = HdiMatrix::build(&[], 2, 1).unwrap();
        assert!(matches!(objective(&s, &m), Err(ModelError::DimensionMismatch { .. })));
        assert!(matches!(gradient(&s, &m), Err(ModelError::DimensionMismatch { .. })));
    }

    #[test]
    fn rmse_cases() {
        let s = LatentState::from_factors(&[1.0, 2.0], &[3.0], 1, 0.0).unwrap();
        assert_eq!(rmse(&s, &[RatingTriple::new(0, 0, 3.0), RatingTriple::new(1, 0, 6.0)]).unwrap(), 0.0);
        assert_eq!(rmse(&s, &[RatingTriple::new(0, 0, 4.0)]).unwrap(), 1.0);
        assert_eq!(rmse(&s, &[]).unwrap_err(), ModelError::EmptyEvalSet);
    }

    fn random_instance(seed: u64, nu: usize, ni: usize, f: usize, lambda: f64) -> (LatentState, HdiMatrix) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::new();
        for u in 0..nu {
            for i in 0..ni {
                if rng.gen_bool(0.6) {
                    t.push(RatingTriple::new(u, i, rng.gen_range(1.0..5.0)));
                }
            }
        }
        let vals = (0..(nu + ni) * f).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = LatentState::new(FlatVector::from_values(vals, nu, ni, f).unwrap(), lambda).unwrap();
        (s, HdiMatrix::build(&t, nu, ni).unwrap())
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (s, m) = random_instance(11, 4, 3, 2, 0.02);
        let g = gradient(&s, &m).unwrap();
        let y = s.params().as_slice().to_vec();
        for k in 0..y.len() {
            let eps = 1e-6 * (1.0 + y[k].abs());
            let mut plus = y.clone();
            plus[k] += eps;
            let mut minus = y.clone();
            minus[k] -= eps;
            let sp = LatentState::new(s.params().with_values(plus).unwrap(), 0.02).unwrap();
            let sm = LatentState::new(s.params().with_values(minus).unwrap(), 0.02).unwrap();
            let fd = (objective(&sp, &m).unwrap() - objective(&sm, &m).unwrap()) / (2.0 * eps);
            let scale = fd.abs().max(g.as_slice()[k].abs()).max(1e-8);
            assert!((fd - g.as_slice()[k]).abs() / scale < 1e-6, "slot {k}: fd {fd} vs {}", g.as_slice()[k]);
        }
    }

    proptest! {
        #[test]
        fn objective_non_negative(seed in any::<u64>(), lambda in 0.0f64..1.0) {
            let (s, m) = random_instance(seed, 3, 4, 2, lambda);
            prop_assert!(objective(&s, &m).unwrap() >= 0.0);
        }

        #[test]
        fn predict_is_bilinear(a in -3.0f64..3.0, yu in proptest::collection::vec(-2.0f64..2.0, 3), yi in proptest::collection::vec(-2.0f64..2.0, 3)) {
            let s = LatentState::from_factors(&yu, &yi, 3, 0.0).unwrap();
            let scaled: Vec<f64> = yu.iter().map(|v| a * v).collect();
            let t = LatentState::from_factors(&scaled, &yi, 3, 0.0).unwrap();
            let lhs = predict(&t, 0, 0).unwrap();
            let rhs = a * predict(&s, 0, 0).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }

        #[test]
        fn rmse_permutation_invariant(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let (s, m) = random_instance(seed, 4, 4, 2, 0.0);
            prop_assume!(!m.is_empty());
            let mut eval = m.entries().to_vec();
            let base = rmse(&s, &eval).unwrap();
            eval.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
            prop_assert!((rmse(&s, &eval).unwrap() - base).abs() <= 1e-12 * (1.0 + base));
        }
    }
}
