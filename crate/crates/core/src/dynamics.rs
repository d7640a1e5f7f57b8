//! Non-linear DebtRank contagion.
//!
//! Relative equity losses evolve as
//!
//! ```text
//! h_i(t+1) = min{1, h_i(t) + sum_j Lambda_ij [pD_j(t) - pD_j(t-1)]}
//! ```
//!
//! where the default probability `pD` is a function of the borrower's own
//! loss. Three rules are provided: Furfine (threshold at `h = 1`), linear
//! DebtRank (`pD = h`) and the non-linear interpolation
//! `pD = h exp(alpha (h - 1))`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BankingSystem, LeverageMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("shocked bank index {index} is out of range for a system of {n} banks")]
    BankOutOfRange { index: usize, n: usize },
    #[error("x_shock must lie in [0, 1], got {0}")]
    InvalidShock(f64),
    #[error("state has {got} banks, leverage matrix has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// How a borrower's relative equity loss maps to its default probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PropagationRule {
    Furfine,
    Linear,
    Nonlinear { alpha: f64 },
}

impl PropagationRule {
    #[inline]
    pub fn default_probability(self, h: f64) -> f64 {
        default_probability(h, self)
    }

    pub fn label(self) -> String {
        match self {
            PropagationRule::Furfine => "furfine".into(),
            PropagationRule::Linear => "linear".into(),
            PropagationRule::Nonlinear { alpha } => format!("nonlinear(alpha={alpha})"),
        }
    }
}

/// Default probability of a bank that has lost a fraction `h` of its equity.
#[inline]
pub fn default_probability(h: f64, rule: PropagationRule) -> f64 {
    match rule {
        PropagationRule::Linear => h,
        PropagationRule::Nonlinear { alpha } => h * (alpha * (h - 1.0)).exp(),
        PropagationRule::Furfine => {
            if h >= 1.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Per-bank losses and the default probabilities of the previous step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContagionState {
    pub h: Vec<f64>,
    pub pd_prev: Vec<f64>,
    pub t: usize,
}

impl ContagionState {
    /// State at `t = 1` with the given losses and `pD(0) = 0`.
    pub fn from_losses(h: Vec<f64>) -> Self {
        let n = h.len();
        Self {
            h,
            pd_prev: vec![0.0; n],
            t: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
}

/// Devalues external assets of `shocked` banks by the fraction `x_shock`.
///
/// Shocked banks start at `h = min(1, x_shock A^E / E)`. Banks with
/// non-positive initial equity start defaulted with `pD(0) = 1`, so their
/// default is already priced in and never propagates.
pub fn apply_initial_shock(
    system: &BankingSystem,
    leverage: &LeverageMatrix,
    shocked: &[usize],
    x_shock: f64,
) -> Result<ContagionState, DynamicsError> {
    let n = system.len();
    if leverage.dim() != n {
        return Err(DynamicsError::DimensionMismatch {
            expected: leverage.dim(),
            got: n,
        });
    }
    if !(0.0..=1.0).contains(&x_shock) {
        return Err(DynamicsError::InvalidShock(x_shock));
    }
    let mut h = vec![0.0; n];
    for &i in shocked {
        if i >= n {
            return Err(DynamicsError::BankOutOfRange { index: i, n });
        }
        let bank = &system.banks()[i];
        let equity = bank.equity();
        if equity > 0.0 {
            h[i] = (x_shock * bank.external_assets() / equity).min(1.0);
        }
    }
    let mut pd_prev = vec![0.0; n];
    for i in 0..n {
        if !leverage.is_valid(i) || system.banks()[i].equity() <= 0.0 {
            h[i] = 1.0;
            pd_prev[i] = 1.0;
        }
    }
    Ok(ContagionState { h, pd_prev, t: 1 })
}

/// Reusable buffers for [`step_in_place`].
#[derive(Debug, Default, Clone)]
pub struct StepScratch {
    pd_now: Vec<f64>,
    delta: Vec<f64>,
}

/// Advances `state` by one step and returns `max_i |h_i(t+1) - h_i(t)|`.
pub fn step_in_place(
    state: &mut ContagionState,
    leverage: &LeverageMatrix,
    rule: PropagationRule,
    scratch: &mut StepScratch,
) -> f64 {
    let n = state.h.len();
    scratch.pd_now.clear();
    scratch
        .pd_now
        .extend(state.h.iter().map(|&h| default_probability(h, rule)));
    scratch.delta.clear();
    scratch.delta.extend(
        scratch
            .pd_now
            .iter()
            .zip(&state.pd_prev)
            .map(|(now, prev)| now - prev),
    );
    let any_change = scratch.delta.iter().any(|&d| d != 0.0);
    let mut max_diff: f64 = 0.0;
    if any_change {
        for i in 0..n {
            let h = state.h[i];
            if h >= 1.0 {
                continue;
            }
            let next = (h + leverage.row_dot(i, &scratch.delta)).min(1.0);
            max_diff = max_diff.max((next - h).abs());
            state.h[i] = next;
        }
    }
    std::mem::swap(&mut state.pd_prev, &mut scratch.pd_now);
    state.t += 1;
    max_diff
}

/// One application of the contagion map.
pub fn step(
    state: &ContagionState,
    leverage: &LeverageMatrix,
    rule: PropagationRule,
) -> ContagionState {
    let mut next = state.clone();
    step_in_place(&mut next, leverage, rule, &mut StepScratch::default());
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Sup-norm tolerance on successive losses.
    pub tol: f64,
    /// Largest step counter value reached before giving up.
    pub t_max: usize,
    /// Keep a copy of `h` in every record.
    pub keep_snapshots: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            t_max: 10_000,
            keep_snapshots: false,
        }
    }
}

/// Aggregate metrics at one time step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    /// Fraction of stressed banks, `0 < h < 1`.
    pub stressed: f64,
    /// Fraction of defaulted banks, `h = 1`.
    pub defaulted: f64,
    /// Equity-weighted relative loss.
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub converged: bool,
    pub steps_to_converge: usize,
    pub final_h: Vec<f64>,
}

impl Trajectory {
    pub fn last(&self) -> &StepRecord {
        self.records
            .last()
            .expect("a trajectory has at least one record")
    }

    /// `H` at the final step.
    pub fn final_loss(&self) -> f64 {
        self.last().loss
    }

    /// `H` right after the shock.
    pub fn initial_loss(&self) -> f64 {
        self.records[0].loss
    }
}

fn record(t: usize, h: &[f64], weights: &[f64], keep: bool) -> StepRecord {
    let n = h.len() as f64;
    let stressed = h.iter().filter(|&&x| x > 0.0 && x < 1.0).count() as f64 / n;
    let defaulted = h.iter().filter(|&&x| x == 1.0).count() as f64 / n;
    let loss = h.iter().zip(weights).map(|(x, w)| x * w).sum();
    StepRecord {
        t,
        stressed,
        defaulted,
        loss,
        h: keep.then(|| h.to_vec()),
    }
}

/// Iterates from `state` until the losses stop moving or `t_max` is reached.
///
/// `weights` aggregate `h` into `H(t)`; they normally come from
/// [`BankingSystem::equity_weights`].
pub fn run_from_state(
    mut state: ContagionState,
    leverage: &LeverageMatrix,
    weights: &[f64],
    rule: PropagationRule,
    opts: RunOptions,
) -> Result<Trajectory, DynamicsError> {
    let n = leverage.dim();
    if state.h.len() != n || state.pd_prev.len() != n || weights.len() != n {
        return Err(DynamicsError::DimensionMismatch {
            expected: n,
            got: state.h.len(),
        });
    }
    let mut records = vec![record(state.t, &state.h, weights, opts.keep_snapshots)];
    let mut scratch = StepScratch::default();
    let mut converged = false;
    while state.t < opts.t_max.max(1) {
        let diff = step_in_place(&mut state, leverage, rule, &mut scratch);
        records.push(record(state.t, &state.h, weights, opts.keep_snapshots));
        if diff < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(Trajectory {
        records,
        converged,
        steps_to_converge: state.t,
        final_h: state.h,
    })
}

/// Shocks `shocked` banks by `x_shock` and propagates to a steady state.
pub fn run(
    system: &BankingSystem,
    leverage: &LeverageMatrix,
    shocked: &[usize],
    x_shock: f64,
    rule: PropagationRule,
    opts: RunOptions,
) -> Result<Trajectory, DynamicsError> {
    let state = apply_initial_shock(system, leverage, shocked, x_shock)?;
    run_from_state(state, leverage, &system.equity_weights(), rule, opts)
}
