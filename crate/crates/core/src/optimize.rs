//! Optimizers and the epoch loop with early stopping.
//!
//! Two second-order steppers share one implementation and differ only in the
//! damping of the inner system `(G + lambda * D + eta * I) dy = -g`:
//!
//! * `slf_fixed`: `eta = gamma` for every epoch.
//! * `acrslf`: `eta = M * ||g||`, recomputed once per epoch from the current
//!   gradient, so damping fades as training converges.
//!
//! The increment is applied unconditionally (`y <- y + dy`). The two first-order
//! baselines (SGD with momentum, Adam) make one shuffled pass over the training
//! entries per epoch and update only the two rows an entry touches.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cg::{self, CgConfig, CgError, CgOutcome};
use crate::dataset::{HdiMatrix, RatingTriple};
use crate::hvp::{CurvatureOperator, DampingMode, DampingSpec, HvpError};
use crate::model::{self, FlatVector, LatentState, ModelError};

/// A run is aborted once the training objective exceeds this multiple of its
/// initial value.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Curvature(#[from] HvpError),
    #[error("conjugate gradient aborted: {0}")]
    Cg(#[from] CgError),
    #[error("diverged at epoch {epoch}: objective {objective:e} vs initial {initial:e}")]
    Diverged { epoch: usize, objective: f64, initial: f64 },
}

impl TrainError {
    /// Numerical failures, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::Cg(_) | TrainError::Diverged { .. } | TrainError::Model(ModelError::NonFiniteFactor)
        )
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
    SlfFixed,
    Acrslf,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [
        OptimizerKind::SgdMomentum,
        OptimizerKind::Adam,
        OptimizerKind::SlfFixed,
        OptimizerKind::Acrslf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adam => "adam",
            OptimizerKind::SlfFixed => "slf_fixed",
            OptimizerKind::Acrslf => "acrslf",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown optimizer {s:?} (expected sgd_momentum, adam, slf_fixed, acrslf)"))
    }
}

/// Optimizer choice with exactly the hyperparameters it uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    SgdMomentum { learning_rate: f64, momentum: f64 },
    Adam { learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64 },
    SlfFixed { gamma: f64 },
    Acrslf { cubic_coefficient: f64 },
}

impl OptimizerConfig {
    pub const DEFAULT_SGD_LEARNING_RATE: f64 = 0.002;
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_ADAM_LEARNING_RATE: f64 = 0.002;
    pub const DEFAULT_BETA1: f64 = 0.9;
    pub const DEFAULT_BETA2: f64 = 0.999;
    pub const DEFAULT_EPSILON: f64 = 1e-8;
    pub const DEFAULT_GAMMA: f64 = 1.0;
    pub const DEFAULT_CUBIC_COEFFICIENT: f64 = 1.0;

    pub fn default_for(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::SgdMomentum => OptimizerConfig::SgdMomentum {
                learning_rate: Self::DEFAULT_SGD_LEARNING_RATE,
                momentum: Self::DEFAULT_MOMENTUM,
            },
            OptimizerKind::Adam => OptimizerConfig::Adam {
                learning_rate: Self::DEFAULT_ADAM_LEARNING_RATE,
                beta1: Self::DEFAULT_BETA1,
                beta2: Self::DEFAULT_BETA2,
                epsilon: Self::DEFAULT_EPSILON,
            },
            OptimizerKind::SlfFixed => OptimizerConfig::SlfFixed {
                gamma: Self::DEFAULT_GAMMA,
            },
            OptimizerKind::Acrslf => OptimizerConfig::Acrslf {
                cubic_coefficient: Self::DEFAULT_CUBIC_COEFFICIENT,
            },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            OptimizerConfig::SgdMomentum { .. } => OptimizerKind::SgdMomentum,
            OptimizerConfig::Adam { .. } => OptimizerKind::Adam,
            OptimizerConfig::SlfFixed { .. } => OptimizerKind::SlfFixed,
            OptimizerConfig::Acrslf { .. } => OptimizerKind::Acrslf,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        match *self {
            OptimizerConfig::SgdMomentum { learning_rate, momentum } => {
                if !(learning_rate.is_finite() && learning_rate > 0.0) {
                    return bad(format!("learning rate must be positive, got {learning_rate}"));
                }
                if !(0.0..1.0).contains(&momentum) {
                    return bad(format!("momentum must lie in [0, 1), got {momentum}"));
                }
            }
            OptimizerConfig::Adam { learning_rate, beta1, beta2, epsilon } => {
                if !(learning_rate.is_finite() && learning_rate > 0.0) {
                    return bad(format!("learning rate must be positive, got {learning_rate}"));
                }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return bad(format!("Adam betas must lie in [0, 1), got {beta1}, {beta2}"));
                }
                if !(epsilon.is_finite() && epsilon > 0.0) {
                    return bad(format!("Adam epsilon must be positive, got {epsilon}"));
                }
            }
            OptimizerConfig::SlfFixed { gamma } => {
                if !(gamma.is_finite() && gamma > 0.0) {
                    return bad(format!("damping gamma must be positive, got {gamma}"));
                }
            }
            OptimizerConfig::Acrslf { cubic_coefficient } => {
                if !(cubic_coefficient.is_finite() && cubic_coefficient > 0.0) {
                    return bad(format!("cubic coefficient M must be positive, got {cubic_coefficient}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub rank: usize,
    pub reg_strength: f64,
    pub cg: CgConfig,
    /// Start each inner solve from the previous increment instead of zero.
    #[serde(default)]
    pub cg_warm_start: bool,
    pub seed: u64,
    /// An epoch counts as an improvement only if it lowers the best RMSE by
    /// more than this.
    pub min_improvement: f64,
    pub init_hi: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default_for(OptimizerKind::Acrslf),
            max_epochs: 500,
            patience: 10,
            rank: 20,
            reg_strength: 0.02,
            cg: CgConfig::default(),
            cg_warm_start: false,
            seed: 0,
            min_improvement: 1e-5,
            init_hi: 0.004,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(TrainError::InvalidConfig(msg.to_string()));
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.rank == 0 {
            return bad("rank must be at least 1");
        }
        if !(self.reg_strength.is_finite() && self.reg_strength >= 0.0) {
            return bad("reg_strength must be finite and non-negative");
        }
        if !(self.min_improvement.is_finite() && self.min_improvement >= 0.0) {
            return bad("min_improvement must be finite and non-negative");
        }
        if !(self.init_hi.is_finite() && self.init_hi > 0.0) {
            return bad("init_hi must be positive");
        }
        self.cg.validate()?;
        self.optimizer.validate()
    }
}

/// What one optimizer step did.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub cg_iterations: usize,
    pub cg_converged: bool,
    /// `||g||` at the start of the step (second-order only; first-order
    /// steps leave this at zero).
    pub gradient_norm: f64,
    pub damping: f64,
    /// Observed-entry visits made by the step.
    pub entry_touches: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub rmse_eval: f64,
    pub objective_train: f64,
    pub wall_seconds: f64,
    pub cg_iterations: usize,
    pub gradient_norm: f64,
    pub damping_value: f64,
    pub entry_touches: u64,
}

/// The damped Newton-type increment and its diagnostics.
#[derive(Debug, Clone)]
pub struct SecondOrderStep {
    pub increment: Vec<f64>,
    pub gradient: FlatVector,
    pub damping: DampingSpec,
    pub cg: CgOutcome,
    pub stats: StepStats,
}

/// Solves `(G + lambda * D + eta * I) dy = -g` by CG with the damping chosen
/// by `mode`. The gradient norm is taken once, before the solve.
pub fn second_order_direction(
    state: &LatentState,
    train: &HdiMatrix,
    mode: DampingMode,
    cg_config: &CgConfig,
    warm_start: Option<&[f64]>,
) -> Result<SecondOrderStep> {
    state.check_matrix(train)?;
    let mut gradient = state.params().zeros_like();
    let gradient_touches = model::gradient_into(state, train, &mut gradient);
    let gradient_norm = gradient.norm();
    let damping = DampingSpec {
        reg_strength: state.reg_strength(),
        mode,
        gradient_norm,
    };
    let mut op = CurvatureOperator::new(state, train, damping)?;
    let rhs: Vec<f64> = gradient.as_slice().iter().map(|g| -g).collect();
    let outcome = cg::solve_from(|v, out| op.apply(v, out), &rhs, warm_start, cg_config)?;
    let stats = StepStats {
        cg_iterations: outcome.iterations_used,
        cg_converged: outcome.converged,
        gradient_norm,
        damping: op.eta(),
        entry_touches: gradient_touches + op.entry_touches(),
    };
    Ok(SecondOrderStep {
        increment: outcome.increment.clone(),
        gradient,
        damping,
        cg: outcome,
        stats,
    })
}

/// One ACRSLF epoch: `eta = M * ||g||`, then `y <- y + dy`.
pub fn step_acrslf(
    state: &LatentState,
    train: &HdiMatrix,
    cubic_coefficient: f64,
    cg_config: &CgConfig,
) -> Result<(LatentState, StepStats)> {
    OptimizerConfig::Acrslf { cubic_coefficient }.validate()?;
    let step = second_order_direction(state, train, DampingMode::Cubic { coefficient: cubic_coefficient }, cg_config, None)?;
    Ok((state.shifted(&step.increment)?, step.stats))
}

/// One fixed-damping SLF epoch: `eta = gamma`, then `y <- y + dy`.
pub fn step_slf(state: &LatentState, train: &HdiMatrix, gamma: f64, cg_config: &CgConfig) -> Result<(LatentState, StepStats)> {
    OptimizerConfig::SlfFixed { gamma }.validate()?;
    let step = second_order_direction(state, train, DampingMode::Fixed { gamma }, cg_config, None)?;
    Ok((state.shifted(&step.increment)?, step.stats))
}

/// Mutable user row `u` and item row `i` of a flat parameter vector.
fn row_pair(values: &mut [f64], num_users: usize, f: usize, u: usize, i: usize) -> (&mut [f64], &mut [f64]) {
    let (users, items) = values.split_at_mut(num_users * f);
    (&mut users[u * f..(u + 1) * f], &mut items[i * f..(i + 1) * f])
}

fn shuffled_order(order: &mut Vec<usize>, len: usize, rng: &mut ChaCha8Rng) {
    if order.len() != len {
        *order = (0..len).collect();
    }
    order.shuffle(rng);
}

/// Per-entry SGD with heavy-ball momentum:
/// `velocity <- beta * velocity + grad`, `y <- y - lr * velocity`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<f64>,
    order: Vec<usize>,
    rng: ChaCha8Rng,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64, state: &LatentState, seed: u64) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate >= 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(TrainError::InvalidConfig(format!(
                "SGD-M needs lr >= 0 and momentum in [0, 1), got {learning_rate}, {momentum}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: vec![0.0; state.params().len()],
            order: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// One shuffled pass over the training entries.
    pub fn epoch(&mut self, state: &mut LatentState, train: &HdiMatrix) -> Result<StepStats> {
        state.check_matrix(train)?;
        let (nu, f, lambda) = (state.num_users(), state.rank(), state.reg_strength());
        shuffled_order(&mut self.order, train.len(), &mut self.rng);
        let entries = train.entries();
        let params = state.params_mut().as_mut_slice();
        let mut touched = 0u64;
        for &k in &self.order {
            let e = entries[k];
            let (yu, yi) = row_pair(params, nu, f, e.user, e.item);
            let (vu, vi) = row_pair(&mut self.velocity, nu, f, e.user, e.item);
            let residual = e.rating - model::dot(yu, yi);
            for d in 0..f {
                let gu = -residual * yi[d] + lambda * yu[d];
                let gi = -residual * yu[d] + lambda * yi[d];
                vu[d] = self.momentum * vu[d] + gu;
                vi[d] = self.momentum * vi[d] + gi;
                yu[d] -= self.learning_rate * vu[d];
                yi[d] -= self.learning_rate * vi[d];
            }
            touched += 1;
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteFactor.into());
        }
        Ok(StepStats {
            entry_touches: touched,
            ..StepStats::default()
        })
    }
}

/// Per-entry Adam with bias correction. Each user or item row keeps its own
/// step count, advanced whenever an entry touches it.
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    /// Running `beta1^t`, `beta2^t` per row (users then items).
    beta1_power: Vec<f64>,
    beta2_power: Vec<f64>,
    order: Vec<usize>,
    rng: ChaCha8Rng,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64, state: &LatentState, seed: u64) -> Result<Self> {
        OptimizerConfig::Adam { learning_rate, beta1, beta2, epsilon }.validate()?;
        let n = state.params().len();
        let rows = state.num_users() + state.num_items();
        Ok(Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            beta1_power: vec![1.0; rows],
            beta2_power: vec![1.0; rows],
            order: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn epoch(&mut self, state: &mut LatentState, train: &HdiMatrix) -> Result<StepStats> {
        state.check_matrix(train)?;
        let (nu, f, lambda) = (state.num_users(), state.rank(), state.reg_strength());
        shuffled_order(&mut self.order, train.len(), &mut self.rng);
        let entries = train.entries();
        let params = state.params_mut().as_mut_slice();
        let mut touched = 0u64;
        let mut grad_u = vec![0.0; f];
        let mut grad_i = vec![0.0; f];
        let order = std::mem::take(&mut self.order);
        for &k in &order {
            let e = entries[k];
            let (yu, yi) = row_pair(params, nu, f, e.user, e.item);
            let residual = e.rating - model::dot(yu, yi);
            for d in 0..f {
                grad_u[d] = -residual * yi[d] + lambda * yu[d];
                grad_i[d] = -residual * yu[d] + lambda * yi[d];
            }
            self.update_row(e.user, e.user * f, yu, &grad_u);
            self.update_row(nu + e.item, (nu + e.item) * f, yi, &grad_i);
            touched += 1;
        }
        self.order = order;
        if params.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteFactor.into());
        }
        Ok(StepStats {
            entry_touches: touched,
            ..StepStats::default()
        })
    }

    fn update_row(&mut self, row: usize, offset: usize, y: &mut [f64], grad: &[f64]) {
        self.beta1_power[row] *= self.beta1;
        self.beta2_power[row] *= self.beta2;
        let correction1 = 1.0 - self.beta1_power[row];
        let correction2 = 1.0 - self.beta2_power[row];
        let m = &mut self.first_moment[offset..offset + y.len()];
        let s = &mut self.second_moment[offset..offset + y.len()];
        for d in 0..y.len() {
            m[d] = self.beta1 * m[d] + (1.0 - self.beta1) * grad[d];
            s[d] = self.beta2 * s[d] + (1.0 - self.beta2) * grad[d] * grad[d];
            let m_hat = m[d] / correction1;
            let s_hat = s[d] / correction2;
            y[d] -= self.learning_rate * m_hat / (s_hat.sqrt() + self.epsilon);
        }
    }
}

enum Stepper {
    Sgd(SgdMomentum),
    Adam(Adam),
    SecondOrder {
        mode: DampingMode,
        cg: CgConfig,
        warm_start: bool,
        previous: Option<Vec<f64>>,
    },
}

impl Stepper {
    fn new(config: &TrainConfig, state: &LatentState) -> Result<Self> {
        Ok(match config.optimizer {
            OptimizerConfig::SgdMomentum { learning_rate, momentum } => {
                Stepper::Sgd(SgdMomentum::new(learning_rate, momentum, state, config.seed)?)
            }
            OptimizerConfig::Adam { learning_rate, beta1, beta2, epsilon } => {
                Stepper::Adam(Adam::new(learning_rate, beta1, beta2, epsilon, state, config.seed)?)
            }
            OptimizerConfig::SlfFixed { gamma } => Stepper::SecondOrder {
                mode: DampingMode::Fixed { gamma },
                cg: config.cg,
                warm_start: config.cg_warm_start,
                previous: None,
            },
            OptimizerConfig::Acrslf { cubic_coefficient } => Stepper::SecondOrder {
                mode: DampingMode::Cubic { coefficient: cubic_coefficient },
                cg: config.cg,
                warm_start: config.cg_warm_start,
                previous: None,
            },
        })
    }

    fn step(&mut self, state: &mut LatentState, train: &HdiMatrix) -> Result<StepStats> {
        match self {
            Stepper::Sgd(sgd) => sgd.epoch(state, train),
            Stepper::Adam(adam) => adam.epoch(state, train),
            Stepper::SecondOrder { mode, cg, warm_start, previous } => {
                let start = if *warm_start { previous.as_deref() } else { None };
                let step = second_order_direction(state, train, *mode, cg, start)?;
                *state = state.shifted(&step.increment)?;
                if *warm_start {
                    *previous = Some(step.increment);
                }
                Ok(step.stats)
            }
        }
    }

    fn is_second_order(&self) -> bool {
        matches!(self, Stepper::SecondOrder { .. })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State with the lowest evaluation RMSE seen (the initial state if no
    /// epoch completed).
    pub best_state: LatentState,
    pub best_epoch: Option<usize>,
    pub best_rmse: f64,
    pub history: Vec<EpochRecord>,
    pub initial_objective: f64,
    pub initial_rmse: f64,
    /// Set when a step failed; `history` then holds the epochs completed
    /// before the failure.
    pub failure: Option<TrainError>,
}

impl TrainOutcome {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }

    pub fn total_seconds(&self) -> f64 {
        self.history.iter().map(|r| r.wall_seconds).sum()
    }

    /// Wall time accumulated up to and including the best epoch.
    pub fn seconds_to_best(&self) -> f64 {
        match self.best_epoch {
            Some(best) => self.history.iter().take_while(|r| r.epoch <= best).map(|r| r.wall_seconds).sum(),
            None => 0.0,
        }
    }
}

pub fn train(initial: LatentState, train: &HdiMatrix, eval_set: &[RatingTriple], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(initial, train, eval_set, config, |_| {})
}

/// As [`train`], calling `observer` after every completed epoch.
pub fn train_with<F>(
    initial: LatentState,
    train: &HdiMatrix,
    eval_set: &[RatingTriple],
    config: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord),
{
    config.validate()?;
    initial.check_matrix(train)?;
    if initial.rank() != config.rank {
        return Err(TrainError::InvalidConfig(format!(
            "state rank {} differs from configured rank {}",
            initial.rank(),
            config.rank
        )));
    }
    if initial.reg_strength() != config.reg_strength {
        return Err(TrainError::InvalidConfig(format!(
            "state regularization {} differs from configured {}",
            initial.reg_strength(),
            config.reg_strength
        )));
    }
    let initial_rmse = model::rmse(&initial, eval_set)?;
    let initial_objective = model::objective(&initial, train)?;
    let divergence_limit = DIVERGENCE_FACTOR * initial_objective.max(f64::MIN_POSITIVE);

    let mut stepper = Stepper::new(config, &initial)?;
    let mut state = initial.clone();
    let mut best_state = initial;
    let mut best_rmse = f64::INFINITY;
    let mut best_epoch = None;
    let mut plateau_reference = f64::INFINITY;
    let mut stale = 0usize;
    let mut history = Vec::new();
    let mut failure = None;

    for epoch in 1..=config.max_epochs {
        let clock = Instant::now();
        let stats = match stepper.step(&mut state, train) {
            Ok(stats) => stats,
            Err(err) => {
                failure = Some(err);
                break;
            }
        };
        let rmse_eval = model::rmse(&state, eval_set)?;
        let wall_seconds = clock.elapsed().as_secs_f64();

        let objective_train = model::objective(&state, train)?;
        let gradient_norm = if stepper.is_second_order() {
            stats.gradient_norm
        } else {
            model::gradient(&state, train)?.norm()
        };
        let record = EpochRecord {
            epoch,
            rmse_eval,
            objective_train,
            wall_seconds,
            cg_iterations: stats.cg_iterations,
            gradient_norm,
            damping_value: stats.damping,
            entry_touches: stats.entry_touches,
        };
        observer(&record);
        history.push(record);

        if !objective_train.is_finite() || objective_train > divergence_limit || !rmse_eval.is_finite() {
            failure = Some(TrainError::Diverged {
                epoch,
                objective: objective_train,
                initial: initial_objective,
            });
            break;
        }

        if rmse_eval < best_rmse {
            best_rmse = rmse_eval;
            best_epoch = Some(epoch);
            best_state = state.clone();
        }
        if rmse_eval < plateau_reference - config.min_improvement {
            plateau_reference = rmse_eval;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    if best_epoch.is_none() {
        best_rmse = initial_rmse;
    }
    Ok(TrainOutcome {
        best_state,
        best_epoch,
        best_rmse,
        history,
        initial_objective,
        initial_rmse,
        failure,
    })
}
