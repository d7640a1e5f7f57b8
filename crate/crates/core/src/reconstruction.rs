//! Reconstruction of bilateral exposures from aggregate interbank totals.
//!
//! Topologies are drawn from a fitness model, `p_ij = z a_i l_j / (1 + z a_i l_j)`
//! with `a_i` the interbank assets of the lender and `l_j` the interbank
//! liabilities of the borrower, where the coupling `z` is calibrated so that
//! the expected number of edges matches a target connectivity. Weights are
//! then fitted to the aggregate margins with RAS (iterative proportional
//! fitting).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::exec::{derive_seed, Execution};
use crate::model::{max_relative_error, BankingSystem, ExposureNetwork, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReconstructionError {
    #[error("connectivity must lie in (0, 1], got {0}")]
    InvalidConnectivity(f64),
    #[error("no bank has positive interbank {0}")]
    NoFitness(&'static str),
    #[error(
        "connectivity {requested} is infeasible: only {positive_pairs} lender/borrower pairs have \
         positive fitness, maximum achievable density is {max_density}"
    )]
    Infeasible {
        requested: f64,
        positive_pairs: usize,
        max_density: f64,
    },
    #[error("bank {bank} has a positive {side} target but no incident edges")]
    StructurallyInfeasible { bank: usize, side: MarginSide },
    #[error("margin targets must be finite and non-negative (bank {bank}, value {value})")]
    InvalidTarget { bank: usize, value: f64 },
    #[error("dimension mismatch: adjacency is {adjacency}, targets have {targets} entries")]
    DimensionMismatch { adjacency: usize, targets: usize },
    #[error("ensemble count must be at least 1")]
    EmptyEnsemble,
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<ReconstructionError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MarginSide {
    Lending,
    Borrowing,
}

impl std::fmt::Display for MarginSide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MarginSide::Lending => "lending",
            MarginSide::Borrowing => "borrowing",
        })
    }
}

/// Relative tolerance on the expected edge count.
pub const CALIBRATION_TOL: f64 = 1e-10;

/// Fitness-model edge probability for lender fitness `a` and borrower fitness `l`.
#[inline]
pub fn edge_probability(z: f64, a: f64, l: f64) -> f64 {
    let al = a * l;
    if al <= 0.0 {
        0.0
    } else if z.is_infinite() {
        1.0
    } else {
        let x = z * al;
        x / (1.0 + x)
    }
}

/// Expected number of directed off-diagonal edges at coupling `z`.
pub fn expected_edge_count(z: f64, lender: &[f64], borrower: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, &a) in lender.iter().enumerate() {
        for (j, &l) in borrower.iter().enumerate() {
            if i != j {
                total += edge_probability(z, a, l);
            }
        }
    }
    total
}

/// A calibrated fitness model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityCalibration {
    /// Fitness coupling; `+inf` when every eligible pair is certain.
    pub z: f64,
    pub target_connectivity: f64,
    pub achieved_expected_edges: f64,
    lender_fitness: Vec<f64>,
    borrower_fitness: Vec<f64>,
}

impl DensityCalibration {
    pub fn dim(&self) -> usize {
        self.lender_fitness.len()
    }

    pub fn edge_probability(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        edge_probability(self.z, self.lender_fitness[i], self.borrower_fitness[j])
    }

    pub fn target_edges(&self) -> f64 {
        let n = self.dim() as f64;
        self.target_connectivity * n * (n - 1.0)
    }

    pub fn lender_fitness(&self) -> &[f64] {
        &self.lender_fitness
    }

    pub fn borrower_fitness(&self) -> &[f64] {
        &self.borrower_fitness
    }
}

/// Calibrates the fitness coupling against the system's interbank totals.
pub fn calibrate_density(
    system: &BankingSystem,
    p: f64,
) -> Result<DensityCalibration, ReconstructionError> {
    calibrate_fitness(
        &system.interbank_assets(),
        &system.interbank_liabilities(),
        p,
    )
}

/// Finds `z` such that the expected edge count equals `p N (N - 1)`.
///
/// The expected count is strictly increasing in `z`, so the root is bracketed
/// by growing geometrically from `z = 1` and then bisected in log space.
pub fn calibrate_fitness(
    lender: &[f64],
    borrower: &[f64],
    p: f64,
) -> Result<DensityCalibration, ReconstructionError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(ReconstructionError::InvalidConnectivity(p));
    }
    if lender.len() != borrower.len() {
        return Err(ReconstructionError::DimensionMismatch {
            adjacency: lender.len(),
            targets: borrower.len(),
        });
    }
    if !lender.iter().any(|&a| a > 0.0) {
        return Err(ReconstructionError::NoFitness("assets"));
    }
    if !borrower.iter().any(|&l| l > 0.0) {
        return Err(ReconstructionError::NoFitness("liabilities"));
    }
    let n = lender.len();
    let possible = (n * (n - 1)) as f64;
    let target = p * possible;
    let positive_pairs = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && lender[i] * borrower[j] > 0.0)
        .count();
    let max_edges = positive_pairs as f64;
    let make = |z: f64| DensityCalibration {
        z,
        target_connectivity: p,
        achieved_expected_edges: expected_edge_count(z, lender, borrower),
        lender_fitness: lender.to_vec(),
        borrower_fitness: borrower.to_vec(),
    };

    if target > max_edges * (1.0 + 1e-12) {
        return Err(ReconstructionError::Infeasible {
            requested: p,
            positive_pairs,
            max_density: max_edges / possible,
        });
    }
    if target >= max_edges * (1.0 - 1e-12) {
        // Every eligible pair must be present: only reachable in the limit.
        return Ok(make(f64::INFINITY));
    }

    let f = |z: f64| expected_edge_count(z, lender, borrower) - target;
    let (mut lo, mut hi) = (1.0_f64, 1.0_f64);
    if f(1.0) < 0.0 {
        while f(hi) < 0.0 {
            lo = hi;
            hi *= 2.0;
        }
    } else {
        while f(lo) > 0.0 {
            hi = lo;
            lo *= 0.5;
            if lo == 0.0 {
                // Target below f64 resolution of the fitness products.
                return Ok(make(f64::MIN_POSITIVE));
            }
        }
    }
    let abs_tol = CALIBRATION_TOL * target;
    let mut z = (lo * hi).sqrt();
    for _ in 0..4096 {
        z = (lo * hi).sqrt();
        let value = f(z);
        if value.abs() <= abs_tol || hi / lo - 1.0 < 4.0 * f64::EPSILON {
            break;
        }
        if value < 0.0 {
            lo = z;
        } else {
            hi = z;
        }
    }
    Ok(make(z))
}

/// Directed unweighted topology with an empty diagonal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Adjacency {
    n: usize,
    edges: Vec<bool>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            edges: vec![false; n * n],
        }
    }

    pub fn complete(n: usize) -> Self {
        let mut adj = Self::empty(n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    adj.edges[i * n + j] = true;
                }
            }
        }
        adj
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut adj = Self::empty(n);
        for &(i, j) in edges {
            adj.insert(i, j);
        }
        adj
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges[i * self.n + j]
    }

    /// Adds `i -> j`; self-loops are ignored.
    pub fn insert(&mut self, i: usize, j: usize) {
        if i != j {
            self.edges[i * self.n + j] = true;
        }
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().filter(|&&e| e).count()
    }

    pub fn density(&self) -> f64 {
        self.edge_count() as f64 / (self.n * (self.n - 1)) as f64
    }

    pub fn out_degree(&self, i: usize) -> usize {
        self.edges[i * self.n..(i + 1) * self.n]
            .iter()
            .filter(|&&e| e)
            .count()
    }

    pub fn in_degree(&self, j: usize) -> usize {
        (0..self.n).filter(|&i| self.has_edge(i, j)).count()
    }

    /// Edges in row-major order.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        let n = self.n;
        (0..n * n)
            .filter(|&k| self.edges[k])
            .map(|k| (k / n, k % n))
            .collect()
    }
}

/// Draws each off-diagonal edge independently with its fitness probability.
///
/// One uniform variate is consumed per ordered pair in row-major order, so
/// the result depends only on the calibration and the generator state.
pub fn sample_topology<R: Rng + ?Sized>(calib: &DensityCalibration, rng: &mut R) -> Adjacency {
    let n = calib.dim();
    let mut adj = Adjacency::empty(n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let u: f64 = rng.random();
            if u < calib.edge_probability(i, j) {
                adj.insert(i, j);
            }
        }
    }
    adj
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RasOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RasOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000,
        }
    }
}

/// Output of [`balance_weights`].
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedWeights {
    pub network: ExposureNetwork,
    /// Max relative margin error against the (rescaled) targets.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Column targets after rescaling to the row total.
    pub col_targets: Vec<f64>,
}

/// RAS balancing of a gravity seed `a_i l_j` on the edges of `adjacency`.
///
/// Column targets are first rescaled so that they sum to the row targets.
/// Non-convergence is not an error: the result carries the residual and a
/// `converged` flag.
pub fn balance_weights(
    adjacency: &Adjacency,
    row_targets: &[f64],
    col_targets: &[f64],
    opts: RasOptions,
) -> Result<BalancedWeights, ReconstructionError> {
    let n = adjacency.dim();
    for targets in [row_targets, col_targets] {
        if targets.len() != n {
            return Err(ReconstructionError::DimensionMismatch {
                adjacency: n,
                targets: targets.len(),
            });
        }
        if let Some((bank, &value)) = targets
            .iter()
            .enumerate()
            .find(|(_, &t)| !t.is_finite() || t < 0.0)
        {
            return Err(ReconstructionError::InvalidTarget { bank, value });
        }
    }
    let row_total: f64 = row_targets.iter().sum();
    let col_total: f64 = col_targets.iter().sum();
    let cols: Vec<f64> = if col_total > 0.0 {
        let factor = row_total / col_total;
        col_targets.iter().map(|c| c * factor).collect()
    } else {
        col_targets.to_vec()
    };
    let rows = row_targets;

    let edges: Vec<(usize, usize)> = adjacency
        .edge_list()
        .into_iter()
        .filter(|&(i, j)| rows[i] * cols[j] > 0.0)
        .collect();
    let mut w: Vec<f64> = edges.iter().map(|&(i, j)| rows[i] * cols[j]).collect();

    let mut out_deg = vec![0usize; n];
    let mut in_deg = vec![0usize; n];
    for &(i, j) in &edges {
        out_deg[i] += 1;
        in_deg[j] += 1;
    }
    for bank in 0..n {
        if rows[bank] > 0.0 && out_deg[bank] == 0 {
            return Err(ReconstructionError::StructurallyInfeasible {
                bank,
                side: MarginSide::Lending,
            });
        }
        if cols[bank] > 0.0 && in_deg[bank] == 0 {
            return Err(ReconstructionError::StructurallyInfeasible {
                bank,
                side: MarginSide::Borrowing,
            });
        }
    }

    let mut row_sum = vec![0.0; n];
    let mut col_sum = vec![0.0; n];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        row_sum.iter_mut().for_each(|s| *s = 0.0);
        for (&(i, _), &x) in edges.iter().zip(&w) {
            row_sum[i] += x;
        }
        for (&(i, _), x) in edges.iter().zip(w.iter_mut()) {
            *x *= rows[i] / row_sum[i];
        }
        col_sum.iter_mut().for_each(|s| *s = 0.0);
        for (&(_, j), &x) in edges.iter().zip(&w) {
            col_sum[j] += x;
        }
        for (&(_, j), x) in edges.iter().zip(w.iter_mut()) {
            *x *= cols[j] / col_sum[j];
        }
        row_sum.iter_mut().for_each(|s| *s = 0.0);
        col_sum.iter_mut().for_each(|s| *s = 0.0);
        for (&(i, j), &x) in edges.iter().zip(&w) {
            row_sum[i] += x;
            col_sum[j] += x;
        }
        residual = max_relative_error(&row_sum, rows).max(max_relative_error(&col_sum, &cols));
        if residual < opts.tol {
            break;
        }
    }

    let mut weights = Matrix::zeros(n);
    for (&(i, j), &x) in edges.iter().zip(&w) {
        weights.set(i, j, x);
    }
    let network = ExposureNetwork::new(weights).expect("RAS weights are finite and off-diagonal");
    Ok(BalancedWeights {
        network,
        residual,
        iterations,
        converged: residual < opts.tol,
        col_targets: cols,
    })
}

/// When to link banks that a topology draw left without counterparties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RepairPolicy {
    /// Only redraw.
    Never,
    /// Redraw first; if no plain draw balances, continue with repaired draws.
    Fallback,
    /// Repair every draw.
    Always,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReconstructionOptions {
    pub ras: RasOptions,
    /// Topologies drawn per sample (per phase, see [`RepairPolicy`]) before
    /// giving up. A draw is rejected when RAS cannot match the margins on it
    /// (structural infeasibility or no convergence within `ras.max_iter`).
    pub max_attempts: usize,
    /// See [`repair_isolated`].
    pub repair: RepairPolicy,
}

impl Default for ReconstructionOptions {
    fn default() -> Self {
        Self {
            ras: RasOptions::default(),
            max_attempts: 200,
            repair: RepairPolicy::Fallback,
        }
    }
}

/// One reconstructed network.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionSample {
    pub adjacency: Adjacency,
    pub weights: ExposureNetwork,
    /// Seed of the ensemble member.
    pub seed: u64,
    /// Number of topology draws used, including the accepted one.
    pub attempts: usize,
    pub ras_residual: f64,
    pub ras_iterations: usize,
    pub converged: bool,
    /// Edges added by the isolated-bank repair.
    pub repaired_edges: usize,
}

/// Adds the most probable out-edge (in-edge) for every bank that has a
/// positive lending (borrowing) fitness but none sampled. Returns the number
/// of edges added.
pub fn repair_isolated(adjacency: &mut Adjacency, calib: &DensityCalibration) -> usize {
    let n = adjacency.dim();
    let a = calib.lender_fitness();
    let l = calib.borrower_fitness();
    let mut added = 0;
    for (i, &ai) in a.iter().enumerate() {
        if ai > 0.0 && !(0..n).any(|j| adjacency.has_edge(i, j) && l[j] > 0.0) {
            if let Some(j) = argmax((0..n).filter(|&j| j != i && l[j] > 0.0), |j| l[j]) {
                adjacency.insert(i, j);
                added += 1;
            }
        }
    }
    for (j, &lj) in l.iter().enumerate() {
        if lj > 0.0 && !(0..n).any(|i| adjacency.has_edge(i, j) && a[i] > 0.0) {
            if let Some(i) = argmax((0..n).filter(|&i| i != j && a[i] > 0.0), |i| a[i]) {
                adjacency.insert(i, j);
                added += 1;
            }
        }
    }
    added
}

fn argmax(candidates: impl Iterator<Item = usize>, key: impl Fn(usize) -> f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for c in candidates {
        let k = key(c);
        if best.is_none_or(|(_, bk)| k > bk) {
            best = Some((c, k));
        }
    }
    best.map(|(c, _)| c)
}

/// Seed of ensemble member `index`.
pub fn sample_seed(base_seed: u64, index: usize) -> u64 {
    derive_seed(base_seed, &[0x7e7_0b01, index as u64])
}

/// Samples a topology with `seed` and balances its weights, redrawing the
/// topology when RAS cannot match the margins on it. When every draw fails,
/// the last unconverged result is returned (flagged) if there is one.
pub fn reconstruct_sample(
    system: &BankingSystem,
    calib: &DensityCalibration,
    seed: u64,
    opts: ReconstructionOptions,
) -> Result<ReconstructionSample, ReconstructionError> {
    let rows = system.interbank_assets();
    let cols = system.interbank_liabilities();
    let mut last_err = None;
    let mut last_unconverged = None;
    let attempts = opts.max_attempts.max(1);
    let phases: &[bool] = match opts.repair {
        RepairPolicy::Never => &[false],
        RepairPolicy::Fallback => &[false, true],
        RepairPolicy::Always => &[true],
    };
    let draws = phases
        .iter()
        .flat_map(|&repair| std::iter::repeat_n(repair, attempts));
    for (attempt, repair) in draws.enumerate() {
        let draw_seed = if attempt == 0 {
            seed
        } else {
            derive_seed(seed, &[attempt as u64])
        };
        let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
        let mut adjacency = sample_topology(calib, &mut rng);
        let repaired_edges = if repair {
            repair_isolated(&mut adjacency, calib)
        } else {
            0
        };
        let balanced = match balance_weights(&adjacency, &rows, &cols, opts.ras) {
            Ok(b) => b,
            Err(e @ ReconstructionError::StructurallyInfeasible { .. }) => {
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let sample = ReconstructionSample {
            adjacency,
            weights: balanced.network,
            seed,
            attempts: attempt + 1,
            ras_residual: balanced.residual,
            ras_iterations: balanced.iterations,
            converged: balanced.converged,
            repaired_edges,
        };
        if sample.converged {
            return Ok(sample);
        }
        last_unconverged = Some(sample);
    }
    // Out of attempts: prefer a flagged result over an error.
    match (last_unconverged, last_err) {
        (Some(sample), _) => Ok(sample),
        (None, Some(e)) => Err(e),
        (None, None) => unreachable!("at least one attempt is made"),
    }
}

/// `count` independent reconstructions sharing one calibration.
pub fn reconstruct_ensemble(
    system: &BankingSystem,
    p: f64,
    count: usize,
    base_seed: u64,
) -> Result<Vec<ReconstructionSample>, ReconstructionError> {
    reconstruct_ensemble_with(
        system,
        p,
        count,
        base_seed,
        ReconstructionOptions::default(),
        Execution::default(),
    )
}

pub fn reconstruct_ensemble_with(
    system: &BankingSystem,
    p: f64,
    count: usize,
    base_seed: u64,
    opts: ReconstructionOptions,
    exec: Execution,
) -> Result<Vec<ReconstructionSample>, ReconstructionError> {
    if count == 0 {
        return Err(ReconstructionError::EmptyEnsemble);
    }
    let calib = calibrate_density(system, p)?;
    exec.map_indexed(count, |k| {
        reconstruct_sample(system, &calib, sample_seed(base_seed, k), opts).map_err(|e| {
            ReconstructionError::Sample {
                index: k,
                source: Box::new(e),
            }
        })
    })
    .into_iter()
    .collect()
}
