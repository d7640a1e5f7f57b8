//! Spectral stability of the leverage matrix.
//!
//! Near `h = 0` the map linearises to `Lambda * exp(-alpha)`, so small shocks
//! die out iff `lambda_max * exp(-alpha) < 1`, i.e. `alpha > ln(lambda_max)`.

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::Serialize;

use crate::model::LeverageMatrix;

/// Width of the band around `alpha = ln(lambda_max)` reported as marginal.
pub const MARGINAL_BAND: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Diagonal shift applied before iterating.
    pub shift: f64,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100_000,
            shift: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralEstimate {
    pub lambda_max: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Perron root of a non-negative matrix by shifted power iteration.
///
/// The spectral radius of a non-negative matrix is the largest spectral
/// radius among the diagonal blocks of its strongly connected components, so
/// each non-trivial component is iterated on its own. Within a component the
/// matrix is irreducible and `Lambda + shift * I` is primitive, which makes
/// the Perron root strictly dominant. Components that are single banks
/// contribute zero (the diagonal is empty).
pub fn spectral_radius(leverage: &LeverageMatrix, opts: SpectralOptions) -> SpectralEstimate {
    let n = leverage.dim();
    let mut graph = DiGraph::<(), ()>::with_capacity(n, leverage.nnz());
    let nodes: Vec<_> = (0..n).map(|_| graph.add_node(())).collect();
    for i in 0..n {
        for (j, v) in leverage.row(i) {
            if v > 0.0 && i != j {
                graph.add_edge(nodes[i], nodes[j], ());
            }
        }
    }

    let mut best = SpectralEstimate {
        lambda_max: 0.0,
        iterations: 0,
        residual: 0.0,
        converged: true,
    };
    let mut local = vec![usize::MAX; n];
    for component in tarjan_scc(&graph) {
        if component.len() < 2 {
            continue;
        }
        let mut members: Vec<usize> = component.iter().map(|ix| ix.index()).collect();
        members.sort_unstable();
        for (k, &g) in members.iter().enumerate() {
            local[g] = k;
        }
        let block: Vec<Vec<(usize, f64)>> = members
            .iter()
            .map(|&g| {
                leverage
                    .row(g)
                    .filter(|&(j, _)| local[j] != usize::MAX)
                    .map(|(j, v)| (local[j], v))
                    .collect()
            })
            .collect();
        let est = power_iteration(&block, opts);
        best.iterations += est.iterations;
        best.residual = best.residual.max(est.residual);
        best.converged &= est.converged;
        best.lambda_max = best.lambda_max.max(est.lambda_max);
        for &g in &members {
            local[g] = usize::MAX;
        }
    }
    best
}

fn power_iteration(rows: &[Vec<(usize, f64)>], opts: SpectralOptions) -> SpectralEstimate {
    let m = rows.len();
    let sigma = opts.shift;
    let mut v = vec![1.0; m];
    let mut w = vec![0.0; m];
    let mut mu = 0.0;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        for (i, row) in rows.iter().enumerate() {
            w[i] = sigma * v[i] + row.iter().map(|&(j, x)| x * v[j]).sum::<f64>();
        }
        let vw: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let vv: f64 = v.iter().map(|a| a * a).sum();
        mu = vw / vv;
        let v_norm = v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
        residual = v
            .iter()
            .zip(&w)
            .map(|(a, b)| (b - mu * a).abs())
            .fold(0.0_f64, f64::max)
            / v_norm;
        if residual < opts.tol {
            break;
        }
        let w_norm = w.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
        for (a, b) in v.iter_mut().zip(&w) {
            *a = b / w_norm;
        }
    }
    SpectralEstimate {
        lambda_max: (mu - sigma).max(0.0),
        iterations,
        residual,
        converged: residual < opts.tol,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stability {
    Stable,
    Unstable,
    Marginal,
}

/// Stable iff `alpha > ln(lambda_max)`; within [`MARGINAL_BAND`] of equality
/// the result is marginal.
pub fn stability_assessment(lambda_max: f64, alpha: f64) -> Stability {
    let critical = critical_alpha(lambda_max);
    if critical == f64::NEG_INFINITY {
        return Stability::Stable;
    }
    let gap = alpha - critical;
    if gap.abs() <= MARGINAL_BAND {
        Stability::Marginal
    } else if gap > 0.0 {
        Stability::Stable
    } else {
        Stability::Unstable
    }
}

/// `ln(lambda_max)`, or negative infinity when `lambda_max = 0`.
pub fn critical_alpha(lambda_max: f64) -> f64 {
    if lambda_max > 0.0 {
        lambda_max.ln()
    } else {
        f64::NEG_INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityReport {
    pub lambda_max: f64,
    pub alpha_critical: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

impl StabilityReport {
    pub fn analyse(leverage: &LeverageMatrix, opts: SpectralOptions) -> Self {
        let est = spectral_radius(leverage, opts);
        Self {
            lambda_max: est.lambda_max,
            alpha_critical: critical_alpha(est.lambda_max),
            iterations: est.iterations,
            residual: est.residual,
            converged: est.converged,
        }
    }

    pub fn assess(&self, alpha: f64) -> Stability {
        stability_assessment(self.lambda_max, alpha)
    }

    pub fn is_stable_at(&self, alpha: f64) -> bool {
        self.assess(alpha) == Stability::Stable
    }
}
