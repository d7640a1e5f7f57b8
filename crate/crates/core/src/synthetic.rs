//! Synthetic balance sheets for systems where real data is unavailable.
//!
//! Total assets are log-normal. Interbank assets, interbank liabilities and
//! equity are fixed fractions of total assets with independent ±10%
//! perturbations; interbank liabilities are then rescaled so that aggregate
//! lending equals aggregate borrowing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BalanceSheet, BankingSystem, ModelError};

const PERTURBATION: f64 = 0.1;
const ASSET_SCALE: f64 = 1.0e3;

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid synthetic parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    pub n: usize,
    pub seed: u64,
    /// Standard deviation of log total assets.
    pub size_dispersion: f64,
    /// Interbank assets (and liabilities) as a fraction of total assets.
    pub interbank_share: f64,
    /// Equity as a fraction of total assets.
    pub equity_ratio: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            n: 183,
            seed: 2008,
            size_dispersion: 0.5,
            interbank_share: 0.13,
            equity_ratio: 0.05,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: String| Err(SyntheticError::InvalidParams(m));
        if self.n < 2 {
            return bad(format!("n must be at least 2, got {}", self.n));
        }
        if !(self.size_dispersion > 0.0 && self.size_dispersion.is_finite()) {
            return bad(format!(
                "size_dispersion must be positive, got {}",
                self.size_dispersion
            ));
        }
        for (name, v) in [
            ("interbank_share", self.interbank_share),
            ("equity_ratio", self.equity_ratio),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        // Worst case perturbations must still leave room for interbank liabilities.
        let hi = 1.0 + PERTURBATION;
        if self.interbank_share * hi + self.equity_ratio * hi >= 1.0 {
            return bad("interbank_share + equity_ratio too large".into());
        }
        Ok(())
    }
}

pub fn generate_synthetic(params: &SyntheticParams) -> Result<BankingSystem, SyntheticError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let sizes = LogNormal::new(0.0, params.size_dispersion)
        .map_err(|e| SyntheticError::InvalidParams(e.to_string()))?;
    fn jitter(rng: &mut ChaCha8Rng) -> f64 {
        1.0 + PERTURBATION * (2.0 * rng.random::<f64>() - 1.0)
    }

    struct Raw {
        assets: f64,
        ib_assets: f64,
        ib_liabilities: f64,
        equity: f64,
    }
    let mut raw = Vec::with_capacity(params.n);
    for _ in 0..params.n {
        let assets = ASSET_SCALE * sizes.sample(&mut rng);
        raw.push(Raw {
            assets,
            ib_assets: params.interbank_share * assets * jitter(&mut rng),
            ib_liabilities: params.interbank_share * assets * jitter(&mut rng),
            equity: params.equity_ratio * assets * jitter(&mut rng),
        });
    }
    let total_lent: f64 = raw.iter().map(|r| r.ib_assets).sum();
    let total_borrowed: f64 = raw.iter().map(|r| r.ib_liabilities).sum();
    let factor = total_lent / total_borrowed;

    let banks = raw
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let liabilities = r.assets - r.equity;
            let ib_liabilities = (r.ib_liabilities * factor).min(liabilities);
            BalanceSheet::new(
                format!("bank{:03}", i + 1),
                r.assets,
                liabilities,
                r.ib_assets,
                ib_liabilities,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BankingSystem::new(
        banks,
        Some(format!("synthetic-{}", params.seed)),
    )?)
}
