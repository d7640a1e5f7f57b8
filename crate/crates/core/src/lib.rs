//! Stress testing of interbank networks with non-linear DebtRank.
//!
//! The crate covers the full pipeline: balance-sheet data ([`model`]),
//! reconstruction of bilateral exposures from aggregate totals
//! ([`reconstruction`]), the contagion dynamics ([`dynamics`]), spectral
//! stability of the leverage matrix ([`stability`]), Monte Carlo ensembles and
//! parameter sweeps ([`experiment`]), and file formats plus synthetic data
//! ([`io`], [`synthetic`], [`config`]).

pub mod config;
pub mod dynamics;
pub mod exec;
pub mod experiment;
pub mod io;
pub mod model;
pub mod reconstruction;
pub mod stability;
pub mod synthetic;

pub use dynamics::{ContagionState, PropagationRule, RunOptions, Trajectory};
pub use exec::Execution;
pub use experiment::{EnsembleResult, ScenarioConfig, SweepResult};
pub use model::{BalanceSheet, BankingSystem, ExposureNetwork, LeverageMatrix, Matrix};
pub use reconstruction::{DensityCalibration, ReconstructionSample};
pub use stability::StabilityReport;
