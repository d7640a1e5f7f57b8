//! Command-line driver: loads a configuration, runs one pipeline stage and
//! writes CSV tables plus a `summary.json` into the output directory.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use debtrank::config::{ConfigError, RunConfigFile};
use debtrank::experiment::{sweep_prepared, ExperimentError, PreparedEnsemble, ScenarioConfig};
use debtrank::io::{self, IoError};
use debtrank::reconstruction::{
    calibrate_density, reconstruct_ensemble_with, ReconstructionError, ReconstructionOptions,
    ReconstructionSample,
};
use debtrank::stability::{SpectralOptions, Stability, StabilityReport};
use debtrank::synthetic::{generate_synthetic, SyntheticError};
use debtrank::{BankingSystem, Execution, ExposureNetwork, PropagationRule};

pub const EXIT_OK: i32 = 0;
/// Bad command line, unreadable or invalid configuration.
pub const EXIT_CONFIG: i32 = 2;
/// Input data that cannot be read or is inconsistent.
pub const EXIT_DATA: i32 = 3;
/// Failures while computing or writing results.
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "debtrank",
    version,
    about = "Interbank stress testing with non-linear DebtRank"
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides `base_seed` (for `generate`, the synthetic data seed).
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Suppress progress messages on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a synthetic balance-sheet table.
    Generate,
    /// Reconstruct an ensemble of exposure networks.
    Reconstruct,
    /// Run the stress-test ensemble for one scenario.
    Run,
    /// Sweep mean final loss over the alpha and x_shock grids.
    Sweep,
    /// Spectral radius and critical alpha of each network.
    Stability,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Reconstruct => "reconstruct",
            Command::Run => "run",
            Command::Sweep => "sweep",
            Command::Stability => "stability",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SyntheticError> for CliError {
    fn from(e: SyntheticError) -> Self {
        match e {
            SyntheticError::InvalidParams(_) => CliError::Config(e.to_string()),
            SyntheticError::Model(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<ReconstructionError> for CliError {
    fn from(e: ReconstructionError) -> Self {
        match e {
            ReconstructionError::InvalidConnectivity(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::InvalidConfig(_) | ExperimentError::EmptyShockSet { .. } => {
                CliError::Config(e.to_string())
            }
            ExperimentError::Model(_) => CliError::Data(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn data_error(e: IoError) -> CliError {
    CliError::Data(e.to_string())
}

fn write_error(e: IoError) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("debtrank: {e}");
            e.exit_code()
        }
    }
}

struct Context {
    cfg: RunConfigFile,
    command: Command,
    quiet: bool,
}

impl Context {
    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn write_table<F>(&self, name: &str, f: F) -> Result<(), CliError>
    where
        F: FnOnce(std::fs::File) -> Result<(), IoError>,
    {
        let path = self.out_path(name);
        io::write_file(&path, f).map_err(write_error)?;
        self.log(format!("wrote {}", path.display()));
        Ok(())
    }

    fn write_summary(&self, seeds: Value, results: Value) -> Result<(), CliError> {
        let summary = json!({
            "command": self.command.name(),
            "config": serde_json::to_value(&self.cfg).map_err(|e| CliError::Runtime(e.to_string()))?,
            "seeds": seeds,
            "results": results,
        });
        let text =
            serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.to_string()))?;
        let path = self.out_path("summary.json");
        std::fs::write(&path, text + "\n")
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        self.log(format!("wrote {}", path.display()));
        Ok(())
    }

    fn scenario(&self) -> Result<ScenarioConfig, CliError> {
        Ok(self.cfg.scenario()?)
    }

    fn system(&self) -> Result<BankingSystem, CliError> {
        match &self.cfg.input {
            Some(path) => io::load_balance_sheets(path).map_err(data_error),
            None => Ok(generate_synthetic(&self.cfg.synthetic)?),
        }
    }

    fn fixed_network(&self, system: &BankingSystem) -> Result<Option<ExposureNetwork>, CliError> {
        match &self.cfg.network {
            Some(path) => io::load_network(path, system.len())
                .map(Some)
                .map_err(data_error),
            None => Ok(None),
        }
    }

    fn prepare(
        &self,
        system: &BankingSystem,
        scenario: &ScenarioConfig,
    ) -> Result<PreparedEnsemble, CliError> {
        match self.fixed_network(system)? {
            Some(network) => Ok(PreparedEnsemble::from_network(system, network, scenario)?),
            None => {
                let prepared = PreparedEnsemble::prepare(system, scenario, Execution::default())?;
                self.warn_unbalanced(prepared.networks.iter().map(|n| &n.sample));
                Ok(prepared)
            }
        }
    }

    fn warn_unbalanced<'a>(&self, samples: impl Iterator<Item = &'a ReconstructionSample>) {
        let (mut bad, mut total) = (0, 0);
        for s in samples {
            total += 1;
            bad += usize::from(!s.converged);
        }
        if bad > 0 {
            self.log(format!(
                "warning: {bad} of {total} reconstructed networks do not match the balance-sheet totals; \
                 consider a larger p"
            ));
        }
    }
}

/// Relative paths inside a configuration file are taken relative to the
/// file's directory.
fn resolve(base: Option<&Path>, path: &mut Option<PathBuf>) {
    if let (Some(base), Some(p)) = (base, path.as_mut()) {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfigFile, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let mut cfg = RunConfigFile::load(path)?;
            let base = path.parent().filter(|p| !p.as_os_str().is_empty());
            resolve(base, &mut cfg.input);
            resolve(base, &mut cfg.network);
            cfg
        }
        None => RunConfigFile::default(),
    };
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Generate => cfg.synthetic.seed = seed,
            _ => cfg.base_seed = seed,
        }
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.scenario()?;
    cfg.synthetic.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let ctx = Context {
        cfg,
        command: cli.command,
        quiet: cli.quiet,
    };
    std::fs::create_dir_all(&ctx.cfg.out_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", ctx.cfg.out_dir.display())))?;
    match cli.command {
        Command::Generate => generate(&ctx),
        Command::Reconstruct => reconstruct(&ctx),
        Command::Run => run_scenario(&ctx),
        Command::Sweep => sweep(&ctx),
        Command::Stability => stability(&ctx),
    }
}

fn system_summary(system: &BankingSystem) -> Value {
    let assets: f64 = system.banks().iter().map(|b| b.total_assets).sum();
    json!({
        "n_banks": system.len(),
        "total_assets": assets,
        "total_interbank_assets": system.interbank_assets().iter().sum::<f64>(),
        "total_interbank_liabilities": system.interbank_liabilities().iter().sum::<f64>(),
        "defaulted_at_start": system.defaulted_at_start().len(),
    })
}

fn generate(ctx: &Context) -> Result<(), CliError> {
    let system = generate_synthetic(&ctx.cfg.synthetic)?;
    ctx.write_table("banks.csv", |f| io::write_balance_sheets(&system, f))?;
    ctx.write_summary(
        json!({ "synthetic_seed": ctx.cfg.synthetic.seed }),
        system_summary(&system),
    )
}

fn reconstruct(ctx: &Context) -> Result<(), CliError> {
    if ctx.cfg.network.is_some() {
        return Err(CliError::Config(
            "`network` is set; reconstruct needs balance sheets only".into(),
        ));
    }
    let scenario = ctx.scenario()?;
    let system = ctx.system()?;
    let calib = calibrate_density(&system, scenario.p)?;
    let samples = reconstruct_ensemble_with(
        &system,
        scenario.p,
        scenario.n_networks,
        scenario.base_seed,
        ReconstructionOptions::default(),
        Execution::default(),
    )?;
    ctx.log(format!(
        "reconstructed {} networks at p = {}",
        samples.len(),
        scenario.p
    ));
    ctx.warn_unbalanced(samples.iter());
    ctx.write_table("reconstruction.csv", |f| {
        io::write_reconstruction_table(&samples, f)
    })?;
    if ctx.cfg.write_weights {
        ctx.write_table("weights.csv", |f| io::write_ensemble_weights(&samples, f))?;
    }
    let rows = system.interbank_assets();
    let cols = system.interbank_liabilities();
    let max_margin_error = samples
        .iter()
        .map(|s| s.weights.margin_error(&rows, &cols))
        .fold(0.0, f64::max);
    let mean_density =
        samples.iter().map(|s| s.adjacency.density()).sum::<f64>() / samples.len() as f64;
    ctx.write_summary(
        json!({
            "base_seed": scenario.base_seed,
            "sample_seeds": samples.iter().map(|s| s.seed).collect::<Vec<_>>(),
        }),
        json!({
            "system": system_summary(&system),
            "z": calib.z,
            "target_edges": calib.target_edges(),
            "expected_edges": calib.achieved_expected_edges,
            "n_samples": samples.len(),
            "n_nonconverged": samples.iter().filter(|s| !s.converged).count(),
            "mean_density": mean_density,
            "max_margin_error": max_margin_error,
        }),
    )
}

fn ensemble_seeds(scenario: &ScenarioConfig, prepared: &PreparedEnsemble) -> Value {
    json!({
        "base_seed": scenario.base_seed,
        "sample_seeds": prepared.networks.iter().map(|n| n.sample.seed).collect::<Vec<_>>(),
    })
}

fn unbalanced(prepared: &PreparedEnsemble) -> usize {
    prepared
        .networks
        .iter()
        .filter(|n| !n.sample.converged)
        .count()
}

fn failures(prepared: &PreparedEnsemble) -> Value {
    prepared
        .failures
        .iter()
        .map(|(k, e)| json!({ "network": k, "reason": e }))
        .collect()
}

fn run_scenario(ctx: &Context) -> Result<(), CliError> {
    let scenario = ctx.scenario()?;
    let system = ctx.system()?;
    let prepared = ctx.prepare(&system, &scenario)?;
    let result = prepared.run(
        &system,
        scenario.x_shock,
        scenario.rule,
        scenario.run_options(),
        Execution::default(),
    )?;
    ctx.log(format!(
        "{}: mean H_inf = {:.6} over {} runs",
        scenario.rule.label(),
        result.h_inf.mean,
        result.n_runs
    ));
    ctx.write_table("trajectory.csv", |f| io::write_trajectory_table(&result, f))?;
    ctx.write_table("runs.csv", |f| io::write_runs_table(&result.runs, f))?;
    if ctx.cfg.write_weights {
        let samples: Vec<_> = prepared.networks.iter().map(|n| n.sample.clone()).collect();
        ctx.write_table("weights.csv", |f| io::write_ensemble_weights(&samples, f))?;
    }
    ctx.write_summary(
        ensemble_seeds(&scenario, &prepared),
        json!({
            "rule": scenario.rule,
            "h_inf": result.h_inf,
            "h_initial": result.h_initial,
            "n_runs": result.n_runs,
            "n_nonconverged": result.n_nonconverged,
            "n_failed": result.n_failed,
            "n_unbalanced_networks": unbalanced(&prepared),
            "failures": failures(&prepared),
        }),
    )
}

fn sweep(ctx: &Context) -> Result<(), CliError> {
    let scenario = ctx.scenario()?;
    let (alphas, shocks) = (&ctx.cfg.alpha_grid, &ctx.cfg.x_shock_grid);
    if alphas.is_empty() || shocks.is_empty() {
        return Err(CliError::Config(
            "alpha_grid and x_shock_grid must be non-empty".into(),
        ));
    }
    for &alpha in alphas {
        ScenarioConfig {
            rule: PropagationRule::Nonlinear { alpha },
            ..scenario
        }
        .validate()?;
    }
    for &x_shock in shocks {
        ScenarioConfig {
            x_shock,
            ..scenario
        }
        .validate()?;
    }
    let system = ctx.system()?;
    let prepared = ctx.prepare(&system, &scenario)?;
    let result = sweep_prepared(
        &prepared,
        &system,
        &scenario,
        alphas,
        shocks,
        Execution::default(),
    )?;
    ctx.log(format!("swept {} x {} grid", alphas.len(), shocks.len()));
    ctx.write_table("surface.csv", |f| io::write_surface_table(&result, f))?;
    ctx.write_summary(
        ensemble_seeds(&scenario, &prepared),
        json!({
            "n_cells": result.cells.len(),
            "runs_per_cell": result.cells.first().map_or(0, |c| c.n_runs),
            "n_nonconverged": result.cells.iter().map(|c| c.n_nonconverged).sum::<usize>(),
            "n_unbalanced_networks": unbalanced(&prepared),
            "failures": failures(&prepared),
        }),
    )
}

fn stability(ctx: &Context) -> Result<(), CliError> {
    let scenario = ctx.scenario()?;
    let system = ctx.system()?;
    let prepared = ctx.prepare(&system, &scenario)?;
    let reports: Vec<(usize, StabilityReport)> = prepared
        .networks
        .iter()
        .map(|n| {
            (
                n.index,
                StabilityReport::analyse(&n.leverage, SpectralOptions::default()),
            )
        })
        .collect();
    ctx.write_table("stability.csv", |f| io::write_stability_table(&reports, f))?;
    let lambdas: Vec<f64> = reports.iter().map(|r| r.1.lambda_max).collect();
    let mean = lambdas.iter().sum::<f64>() / lambdas.len() as f64;
    let alpha = match scenario.rule {
        PropagationRule::Nonlinear { alpha } => Some(alpha),
        _ => None,
    };
    let assessment = alpha.map(|a| {
        let count = |s: Stability| reports.iter().filter(|r| r.1.assess(a) == s).count();
        json!({
            "alpha": a,
            "stable": count(Stability::Stable),
            "marginal": count(Stability::Marginal),
            "unstable": count(Stability::Unstable),
        })
    });
    ctx.log(format!(
        "mean lambda_max = {mean:.6} over {} networks",
        reports.len()
    ));
    ctx.write_summary(
        ensemble_seeds(&scenario, &prepared),
        json!({
            "n_networks": reports.len(),
            "lambda_max_mean": mean,
            "lambda_max_min": lambdas.iter().copied().fold(f64::INFINITY, f64::min),
            "lambda_max_max": lambdas.iter().copied().fold(0.0, f64::max),
            "n_nonconverged": reports.iter().filter(|r| !r.1.converged).count(),
            "assessment": assessment,
            "n_unbalanced_networks": unbalanced(&prepared),
            "failures": failures(&prepared),
        }),
    )
}
