//! Stress-test ensembles: reconstructed networks crossed with random shock
//! sets, parameter sweeps, and summary statistics.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, DynamicsError, PropagationRule, RunOptions, Trajectory};
use crate::exec::{derive_seed, Execution};
use crate::model::{build_leverage, BankingSystem, ExposureNetwork, LeverageMatrix, ModelError};
use crate::reconstruction::{
    calibrate_density, reconstruct_sample, sample_seed, Adjacency, DensityCalibration,
    ReconstructionError, ReconstructionOptions, ReconstructionSample,
};

const SHOCK_STREAM: u64 = 0x5_0c4;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("p_shock = {p_shock} selects no bank out of {n}")]
    EmptyShockSet { n: usize, p_shock: f64 },
    #[error(transparent)]
    Reconstruction(#[from] ReconstructionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("no run succeeded ({failed} failures); first failure: {first}")]
    NoSuccessfulRuns { failed: usize, first: String },
}

/// Parameters of one stress scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Target network connectivity.
    pub p: f64,
    pub n_networks: usize,
    pub n_shock_realizations: usize,
    /// Fraction of banks hit by the initial shock.
    pub p_shock: f64,
    /// Fraction of external assets lost by each shocked bank.
    pub x_shock: f64,
    pub rule: PropagationRule,
    pub base_seed: u64,
    pub tol: f64,
    pub t_max: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            p: 0.05,
            n_networks: 100,
            n_shock_realizations: 10,
            p_shock: 0.05,
            x_shock: 0.005,
            rule: PropagationRule::Nonlinear { alpha: 1.0 },
            base_seed: 0,
            tol: 1e-10,
            t_max: 10_000,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: String| Err(ExperimentError::InvalidConfig(msg));
        if !(self.p > 0.0 && self.p <= 1.0) {
            return bad(format!("p must lie in (0, 1], got {}", self.p));
        }
        if !(self.p_shock > 0.0 && self.p_shock <= 1.0) {
            return bad(format!("p_shock must lie in (0, 1], got {}", self.p_shock));
        }
        if !(0.0..=1.0).contains(&self.x_shock) {
            return bad(format!("x_shock must lie in [0, 1], got {}", self.x_shock));
        }
        if self.n_networks == 0 || self.n_shock_realizations == 0 {
            return bad("n_networks and n_shock_realizations must be at least 1".into());
        }
        if let PropagationRule::Nonlinear { alpha } = self.rule {
            if !(alpha >= 0.0 && alpha.is_finite()) {
                return bad(format!(
                    "alpha must be finite and non-negative, got {alpha}"
                ));
            }
        }
        if self.tol.is_nan() || self.tol <= 0.0 || self.t_max == 0 {
            return bad("tol must be positive and t_max at least 1".into());
        }
        Ok(())
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            tol: self.tol,
            t_max: self.t_max,
            keep_snapshots: false,
        }
    }
}

/// Picks `round(p_shock * n)` distinct banks uniformly, or every bank when
/// `p_shock = 1`. The result is sorted.
pub fn sample_shock_set<R: Rng + ?Sized>(
    n: usize,
    p_shock: f64,
    rng: &mut R,
) -> Result<Vec<usize>, ExperimentError> {
    if !(p_shock > 0.0 && p_shock <= 1.0) {
        return Err(ExperimentError::InvalidConfig(format!(
            "p_shock must lie in (0, 1], got {p_shock}"
        )));
    }
    if p_shock == 1.0 {
        return Ok((0..n).collect());
    }
    let k = (p_shock * n as f64).round() as usize;
    if k == 0 {
        return Err(ExperimentError::EmptyShockSet { n, p_shock });
    }
    let mut chosen = sample(rng, n, k.min(n)).into_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Seed for shock realization `realization` on network `network`.
pub fn shock_seed(base_seed: u64, network: usize, realization: usize) -> u64 {
    derive_seed(
        base_seed,
        &[SHOCK_STREAM, network as u64, realization as u64],
    )
}

fn shock_sets(
    n: usize,
    cfg: &ScenarioConfig,
    network: usize,
) -> Result<Vec<Vec<usize>>, ExperimentError> {
    (0..cfg.n_shock_realizations)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(shock_seed(cfg.base_seed, network, r));
            sample_shock_set(n, cfg.p_shock, &mut rng)
        })
        .collect()
}

/// One reconstructed network ready for propagation.
#[derive(Debug, Clone)]
pub struct PreparedNetwork {
    pub index: usize,
    pub sample: ReconstructionSample,
    pub leverage: LeverageMatrix,
    /// Shocked banks for each realization.
    pub shock_sets: Vec<Vec<usize>>,
}

/// Networks and shock sets shared by every run of an ensemble or sweep.
#[derive(Debug, Clone)]
pub struct PreparedEnsemble {
    /// `None` when the system has no interbank totals at all; every network
    /// is then empty.
    pub calibration: Option<DensityCalibration>,
    pub networks: Vec<PreparedNetwork>,
    /// Networks whose reconstruction failed, with the reason.
    pub failures: Vec<(usize, String)>,
}

impl PreparedEnsemble {
    pub fn prepare(
        system: &BankingSystem,
        cfg: &ScenarioConfig,
        exec: Execution,
    ) -> Result<Self, ExperimentError> {
        Self::prepare_with(system, cfg, ReconstructionOptions::default(), exec)
    }

    pub fn prepare_with(
        system: &BankingSystem,
        cfg: &ScenarioConfig,
        opts: ReconstructionOptions,
        exec: Execution,
    ) -> Result<Self, ExperimentError> {
        cfg.validate()?;
        let n = system.len();
        let no_interbank = system
            .banks()
            .iter()
            .all(|b| b.interbank_assets == 0.0 && b.interbank_liabilities == 0.0);
        let calibration = if no_interbank {
            None
        } else {
            Some(calibrate_density(system, cfg.p)?)
        };
        let built = exec.map_indexed(cfg.n_networks, |k| -> Result<PreparedNetwork, String> {
            let seed = sample_seed(cfg.base_seed, k);
            let sample = match &calibration {
                Some(calib) => {
                    reconstruct_sample(system, calib, seed, opts).map_err(|e| e.to_string())?
                }
                None => ReconstructionSample {
                    adjacency: Adjacency::empty(n),
                    weights: ExposureNetwork::empty(n),
                    seed,
                    attempts: 0,
                    ras_residual: 0.0,
                    ras_iterations: 0,
                    converged: true,
                    repaired_edges: 0,
                },
            };
            let leverage = build_leverage(system, &sample.weights).map_err(|e| e.to_string())?;
            Ok(PreparedNetwork {
                index: k,
                sample,
                leverage,
                shock_sets: Vec::new(),
            })
        });
        let mut networks = Vec::new();
        let mut failures = Vec::new();
        for (k, result) in built.into_iter().enumerate() {
            match result {
                Ok(mut net) => {
                    net.shock_sets = shock_sets(n, cfg, k)?;
                    networks.push(net);
                }
                Err(e) => failures.push((k, e)),
            }
        }
        if networks.is_empty() {
            return Err(ExperimentError::NoSuccessfulRuns {
                failed: failures.len(),
                first: failures.first().map(|f| f.1.clone()).unwrap_or_default(),
            });
        }
        Ok(Self {
            calibration,
            networks,
            failures,
        })
    }

    /// Uses one observed network instead of reconstructing; `cfg.p` and
    /// `cfg.n_networks` are ignored.
    pub fn from_network(
        system: &BankingSystem,
        network: ExposureNetwork,
        cfg: &ScenarioConfig,
    ) -> Result<Self, ExperimentError> {
        cfg.validate()?;
        let n = system.len();
        let leverage = build_leverage(system, &network)?;
        let edges: Vec<(usize, usize)> =
            network.triplets().iter().map(|&(i, j, _)| (i, j)).collect();
        let residual =
            network.margin_error(&system.interbank_assets(), &system.interbank_liabilities());
        let sample = ReconstructionSample {
            adjacency: Adjacency::from_edges(n, &edges),
            weights: network,
            seed: cfg.base_seed,
            attempts: 0,
            ras_residual: residual,
            ras_iterations: 0,
            converged: true,
            repaired_edges: 0,
        };
        Ok(Self {
            calibration: None,
            networks: vec![PreparedNetwork {
                index: 0,
                sample,
                leverage,
                shock_sets: shock_sets(n, cfg, 0)?,
            }],
            failures: Vec::new(),
        })
    }

    /// Propagates `x_shock` with `rule` on every network and shock set.
    pub fn run(
        &self,
        system: &BankingSystem,
        x_shock: f64,
        rule: PropagationRule,
        opts: RunOptions,
        exec: Execution,
    ) -> Result<EnsembleResult, ExperimentError> {
        let tasks: Vec<(usize, usize)> = self
            .networks
            .iter()
            .enumerate()
            .flat_map(|(ni, net)| (0..net.shock_sets.len()).map(move |r| (ni, r)))
            .collect();
        let outcomes = exec.map_indexed(tasks.len(), |t| {
            let (ni, r) = tasks[t];
            let net = &self.networks[ni];
            dynamics::run(
                system,
                &net.leverage,
                &net.shock_sets[r],
                x_shock,
                rule,
                opts,
            )
        });
        let mut runs = Vec::with_capacity(outcomes.len());
        let mut trajectories = Vec::with_capacity(outcomes.len());
        let mut failures: Vec<String> = self.failures.iter().map(|f| f.1.clone()).collect();
        for (&(ni, r), outcome) in tasks.iter().zip(outcomes) {
            match outcome {
                Ok(traj) => {
                    runs.push(RunSummary::new(self.networks[ni].index, r, &traj));
                    trajectories.push(traj);
                }
                Err(e) => failures.push(e.to_string()),
            }
        }
        let n_failed = failures.len();
        if runs.is_empty() {
            return Err(ExperimentError::NoSuccessfulRuns {
                failed: n_failed,
                first: failures.into_iter().next().unwrap_or_default(),
            });
        }
        Ok(EnsembleResult::aggregate(runs, &trajectories, n_failed))
    }
}

/// Outcome of a single propagation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub network: usize,
    pub realization: usize,
    pub initial_h: f64,
    pub final_h: f64,
    pub steps: usize,
    pub converged: bool,
}

impl RunSummary {
    fn new(network: usize, realization: usize, traj: &Trajectory) -> Self {
        Self {
            network,
            realization,
            initial_h: traj.initial_loss(),
            final_h: traj.final_loss(),
            steps: traj.steps_to_converge,
            converged: traj.converged,
        }
    }
}

/// Mean and standard error of a quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    /// Sample mean and `sd / sqrt(n)` with the unbiased sample deviation.
    pub fn from_samples(values: impl IntoIterator<Item = f64> + Clone) -> Self {
        let mut n = 0usize;
        let mut sum = 0.0;
        for v in values.clone() {
            n += 1;
            sum += v;
        }
        if n == 0 {
            return Self {
                mean: f64::NAN,
                stderr: f64::NAN,
            };
        }
        let mean = sum / n as f64;
        if n == 1 {
            return Self { mean, stderr: 0.0 };
        }
        let ss: f64 = values.into_iter().map(|v| (v - mean) * (v - mean)).sum();
        let sd = (ss / (n - 1) as f64).sqrt();
        Self {
            mean,
            stderr: sd / (n as f64).sqrt(),
        }
    }
}

/// Ensemble averages at one time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesPoint {
    pub t: usize,
    pub stressed: Estimate,
    pub defaulted: Estimate,
    pub loss: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleResult {
    pub h_inf: Estimate,
    pub h_initial: Estimate,
    /// Time series padded with each run's final values.
    pub series: Vec<SeriesPoint>,
    pub n_runs: usize,
    pub n_nonconverged: usize,
    pub n_failed: usize,
    pub runs: Vec<RunSummary>,
}

impl EnsembleResult {
    fn aggregate(runs: Vec<RunSummary>, trajectories: &[Trajectory], n_failed: usize) -> Self {
        let h_inf = Estimate::from_samples(runs.iter().map(|r| r.final_h));
        let h_initial = Estimate::from_samples(runs.iter().map(|r| r.initial_h));
        let len = trajectories
            .iter()
            .map(|t| t.records.len())
            .max()
            .unwrap_or(0);
        let t0 = trajectories.first().map_or(1, |t| t.records[0].t);
        fn at(tr: &Trajectory, k: usize) -> &dynamics::StepRecord {
            &tr.records[k.min(tr.records.len() - 1)]
        }
        let series = (0..len)
            .map(|k| SeriesPoint {
                t: t0 + k,
                stressed: Estimate::from_samples(trajectories.iter().map(|tr| at(tr, k).stressed)),
                defaulted: Estimate::from_samples(
                    trajectories.iter().map(|tr| at(tr, k).defaulted),
                ),
                loss: Estimate::from_samples(trajectories.iter().map(|tr| at(tr, k).loss)),
            })
            .collect();
        Self {
            h_inf,
            h_initial,
            series,
            n_runs: runs.len(),
            n_nonconverged: runs.iter().filter(|r| !r.converged).count(),
            n_failed,
            runs,
        }
    }

    pub fn mean_h_inf(&self) -> f64 {
        self.h_inf.mean
    }

    pub fn stderr_h_inf(&self) -> f64 {
        self.h_inf.stderr
    }
}

/// Reconstructs `cfg.n_networks` networks and runs every shock realization.
pub fn run_ensemble(
    system: &BankingSystem,
    cfg: &ScenarioConfig,
) -> Result<EnsembleResult, ExperimentError> {
    run_ensemble_with(system, cfg, Execution::default())
}

pub fn run_ensemble_with(
    system: &BankingSystem,
    cfg: &ScenarioConfig,
    exec: Execution,
) -> Result<EnsembleResult, ExperimentError> {
    let prepared = PreparedEnsemble::prepare(system, cfg, exec)?;
    prepared.run(system, cfg.x_shock, cfg.rule, cfg.run_options(), exec)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub x_shock: f64,
    pub mean_h_inf: f64,
    pub stderr_h_inf: f64,
    pub mean_h_initial: f64,
    pub n_runs: usize,
    pub n_nonconverged: usize,
}

/// `H_inf` over an `(alpha, x_shock)` grid, alpha-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub p: f64,
    pub p_shock: f64,
    pub alpha_grid: Vec<f64>,
    pub x_shock_grid: Vec<f64>,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, alpha_index: usize, x_index: usize) -> &SweepCell {
        &self.cells[alpha_index * self.x_shock_grid.len() + x_index]
    }
}

/// Runs the non-linear rule on every grid cell, reusing one set of networks
/// and shock sets for all cells.
pub fn sweep_h_surface(
    system: &BankingSystem,
    template: &ScenarioConfig,
    alpha_grid: &[f64],
    x_shock_grid: &[f64],
) -> Result<SweepResult, ExperimentError> {
    sweep_h_surface_with(
        system,
        template,
        alpha_grid,
        x_shock_grid,
        Execution::default(),
    )
}

pub fn sweep_h_surface_with(
    system: &BankingSystem,
    template: &ScenarioConfig,
    alpha_grid: &[f64],
    x_shock_grid: &[f64],
    exec: Execution,
) -> Result<SweepResult, ExperimentError> {
    if alpha_grid.is_empty() || x_shock_grid.is_empty() {
        return Err(ExperimentError::InvalidConfig(
            "sweep grids must be non-empty".into(),
        ));
    }
    for &alpha in alpha_grid {
        ScenarioConfig {
            rule: PropagationRule::Nonlinear { alpha },
            ..*template
        }
        .validate()?;
    }
    for &x_shock in x_shock_grid {
        ScenarioConfig {
            x_shock,
            ..*template
        }
        .validate()?;
    }
    let prepared = PreparedEnsemble::prepare(system, template, exec)?;
    sweep_prepared(&prepared, system, template, alpha_grid, x_shock_grid, exec)
}

pub fn sweep_prepared(
    prepared: &PreparedEnsemble,
    system: &BankingSystem,
    template: &ScenarioConfig,
    alpha_grid: &[f64],
    x_shock_grid: &[f64],
    exec: Execution,
) -> Result<SweepResult, ExperimentError> {
    let mut cells = Vec::with_capacity(alpha_grid.len() * x_shock_grid.len());
    for &alpha in alpha_grid {
        for &x_shock in x_shock_grid {
            let res = prepared.run(
                system,
                x_shock,
                PropagationRule::Nonlinear { alpha },
                template.run_options(),
                exec,
            )?;
            cells.push(SweepCell {
                alpha,
                x_shock,
                mean_h_inf: res.h_inf.mean,
                stderr_h_inf: res.h_inf.stderr,
                mean_h_initial: res.h_initial.mean,
                n_runs: res.n_runs,
                n_nonconverged: res.n_nonconverged,
            });
        }
    }
    Ok(SweepResult {
        p: template.p,
        p_shock: template.p_shock,
        alpha_grid: alpha_grid.to_vec(),
        x_shock_grid: x_shock_grid.to_vec(),
        cells,
    })
}

/// Rescales an `x_shock` range given for `p_shock = 1` so that the total
/// shock `p_shock * x_shock` spans the same range.
pub fn total_shock_normalizer(p_shock: f64, reference: (f64, f64)) -> (f64, f64) {
    (reference.0 / p_shock, reference.1 / p_shock)
}
