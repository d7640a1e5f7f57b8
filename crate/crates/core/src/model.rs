//! Balance sheets, the banking system, exposure networks and the interbank
//! leverage matrix that drives contagion.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("bank {bank_id}: field `{field}` must be a finite non-negative amount, got {value}")]
    InvalidAmount {
        bank_id: String,
        field: &'static str,
        value: f64,
    },
    #[error(
        "bank {bank_id}: inconsistent record, {field} ({part}) exceeds {total_field} ({total})"
    )]
    InconsistentRecord {
        bank_id: String,
        field: &'static str,
        part: f64,
        total_field: &'static str,
        total: f64,
    },
    #[error("duplicate bank id `{0}`")]
    DuplicateBank(String),
    #[error("a banking system needs at least 2 banks, got {0}")]
    TooFewBanks(usize),
    #[error("dimension mismatch: expected {expected}x{expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("entry ({row}, {col}) of {what} is invalid: {value}")]
    InvalidEntry {
        what: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },
}

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n {
                return Err(ModelError::DimensionMismatch {
                    expected: n,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self { n, data })
    }

    pub fn from_vec(n: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != n * n {
            return Err(ModelError::DimensionMismatch {
                expected: n,
                got: data.len(),
            });
        }
        Ok(Self { n, data })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.n + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n];
        for i in 0..self.n {
            for (s, w) in sums.iter_mut().zip(self.row(i)) {
                *s += w;
            }
        }
        sums
    }

    /// Number of strictly positive entries.
    pub fn nnz(&self) -> usize {
        self.data.iter().filter(|&&w| w > 0.0).count()
    }
}

/// One bank's aggregate balance sheet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceSheet {
    pub bank_id: String,
    pub total_assets: f64,
    pub total_liabilities: f64,
    pub interbank_assets: f64,
    pub interbank_liabilities: f64,
}

/// Quantities derived from a balance sheet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedExternals {
    pub external_assets: f64,
    pub external_liabilities: f64,
    pub equity: f64,
}

impl BalanceSheet {
    pub fn new(
        bank_id: impl Into<String>,
        total_assets: f64,
        total_liabilities: f64,
        interbank_assets: f64,
        interbank_liabilities: f64,
    ) -> Result<Self, ModelError> {
        let sheet = Self {
            bank_id: bank_id.into(),
            total_assets,
            total_liabilities,
            interbank_assets,
            interbank_liabilities,
        };
        sheet.validate()?;
        Ok(sheet)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("total_assets", self.total_assets),
            ("total_liabilities", self.total_liabilities),
            ("interbank_assets", self.interbank_assets),
            ("interbank_liabilities", self.interbank_liabilities),
        ];
        for (field, value) in fields {
            if !value.is_finite() || value < 0.0 {
                return Err(ModelError::InvalidAmount {
                    bank_id: self.bank_id.clone(),
                    field,
                    value,
                });
            }
        }
        if self.interbank_assets > self.total_assets {
            return Err(ModelError::InconsistentRecord {
                bank_id: self.bank_id.clone(),
                field: "interbank_assets",
                part: self.interbank_assets,
                total_field: "total_assets",
                total: self.total_assets,
            });
        }
        if self.interbank_liabilities > self.total_liabilities {
            return Err(ModelError::InconsistentRecord {
                bank_id: self.bank_id.clone(),
                field: "interbank_liabilities",
                part: self.interbank_liabilities,
                total_field: "total_liabilities",
                total: self.total_liabilities,
            });
        }
        Ok(())
    }

    /// External assets, external liabilities and equity.
    pub fn derive_externals(&self) -> Result<DerivedExternals, ModelError> {
        self.validate()?;
        Ok(DerivedExternals {
            external_assets: self.total_assets - self.interbank_assets,
            external_liabilities: self.total_liabilities - self.interbank_liabilities,
            equity: self.total_assets - self.total_liabilities,
        })
    }

    #[inline]
    pub fn equity(&self) -> f64 {
        self.total_assets - self.total_liabilities
    }

    #[inline]
    pub fn external_assets(&self) -> f64 {
        self.total_assets - self.interbank_assets
    }
}

/// Free-function form of [`BalanceSheet::derive_externals`].
pub fn derive_externals(sheet: &BalanceSheet) -> Result<DerivedExternals, ModelError> {
    sheet.derive_externals()
}

/// A validated set of at least two banks with unique identifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankingSystem {
    banks: Vec<BalanceSheet>,
    year_label: Option<String>,
}

impl BankingSystem {
    pub fn new(banks: Vec<BalanceSheet>, year_label: Option<String>) -> Result<Self, ModelError> {
        if banks.len() < 2 {
            return Err(ModelError::TooFewBanks(banks.len()));
        }
        let mut seen = HashSet::with_capacity(banks.len());
        for bank in &banks {
            bank.validate()?;
            if !seen.insert(bank.bank_id.as_str()) {
                return Err(ModelError::DuplicateBank(bank.bank_id.clone()));
            }
        }
        Ok(Self { banks, year_label })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.banks.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.banks.is_empty()
    }

    pub fn banks(&self) -> &[BalanceSheet] {
        &self.banks
    }

    pub fn year_label(&self) -> Option<&str> {
        self.year_label.as_deref()
    }

    pub fn equities(&self) -> Vec<f64> {
        self.banks.iter().map(BalanceSheet::equity).collect()
    }

    pub fn interbank_assets(&self) -> Vec<f64> {
        self.banks.iter().map(|b| b.interbank_assets).collect()
    }

    pub fn interbank_liabilities(&self) -> Vec<f64> {
        self.banks.iter().map(|b| b.interbank_liabilities).collect()
    }

    /// Banks whose initial equity is not positive.
    pub fn defaulted_at_start(&self) -> Vec<usize> {
        self.banks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.equity() <= 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Weights `E_i(0) / sum_j E_j(0)` used to aggregate relative losses.
    ///
    /// Non-positive equities contribute zero weight. If no bank has positive
    /// equity the weights fall back to uniform.
    pub fn equity_weights(&self) -> Vec<f64> {
        let positive: Vec<f64> = self.banks.iter().map(|b| b.equity().max(0.0)).collect();
        let total: f64 = positive.iter().sum();
        if total > 0.0 {
            positive.iter().map(|e| e / total).collect()
        } else {
            vec![1.0 / self.len() as f64; self.len()]
        }
    }
}

/// Bilateral interbank loans: entry `(i, j)` is the amount lent by `i` to `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureNetwork {
    weights: Matrix,
    recovery: Option<Matrix>,
}

impl ExposureNetwork {
    pub fn new(weights: Matrix) -> Result<Self, ModelError> {
        Self::with_recovery(weights, None)
    }

    pub fn with_recovery(weights: Matrix, recovery: Option<Matrix>) -> Result<Self, ModelError> {
        let n = weights.dim();
        for i in 0..n {
            for j in 0..n {
                let w = weights.get(i, j);
                if !w.is_finite() || w < 0.0 || (i == j && w != 0.0) {
                    return Err(ModelError::InvalidEntry {
                        what: "exposure weights",
                        row: i,
                        col: j,
                        value: w,
                    });
                }
            }
        }
        if let Some(r) = &recovery {
            if r.dim() != n {
                return Err(ModelError::DimensionMismatch {
                    expected: n,
                    got: r.dim(),
                });
            }
            for i in 0..n {
                for j in 0..n {
                    let v = r.get(i, j);
                    if !(0.0..=1.0).contains(&v) {
                        return Err(ModelError::InvalidEntry {
                            what: "recovery rates",
                            row: i,
                            col: j,
                            value: v,
                        });
                    }
                }
            }
        }
        Ok(Self { weights, recovery })
    }

    /// Network without any interbank loans.
    pub fn empty(n: usize) -> Self {
        Self {
            weights: Matrix::zeros(n),
            recovery: None,
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.weights.dim()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    /// Recovery rate for the loan `i -> j`; zero when no recovery matrix is set.
    pub fn recovery(&self, i: usize, j: usize) -> f64 {
        self.recovery.as_ref().map_or(0.0, |r| r.get(i, j))
    }

    pub fn recovery_matrix(&self) -> Option<&Matrix> {
        self.recovery.as_ref()
    }

    /// Largest relative deviation of row sums from interbank assets and of
    /// column sums from interbank liabilities.
    pub fn margin_error(&self, row_targets: &[f64], col_targets: &[f64]) -> f64 {
        max_relative_error(&self.weights.row_sums(), row_targets)
            .max(max_relative_error(&self.weights.col_sums(), col_targets))
    }

    /// Non-zero entries as `(lender, borrower, weight)` triplets in row-major order.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let n = self.dim();
        let mut out = Vec::new();
        for i in 0..n {
            for (j, &w) in self.weights.row(i).iter().enumerate() {
                if w != 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }
}

pub(crate) fn max_relative_error(actual: &[f64], target: &[f64]) -> f64 {
    actual
        .iter()
        .zip(target)
        .map(|(a, t)| (a - t).abs() / t.max(f64::MIN_POSITIVE))
        .filter(|e| !e.is_nan())
        .fold(0.0, f64::max)
}

/// Interbank leverage `A_ij(0) / E_i(0)` stored in compressed sparse rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LeverageMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl LeverageMatrix {
    /// Builds a leverage matrix directly from dense entries. Rows flagged as
    /// invalid are zeroed.
    pub fn from_dense(lambda: &Matrix, valid: Vec<bool>) -> Result<Self, ModelError> {
        let n = lambda.dim();
        if valid.len() != n {
            return Err(ModelError::DimensionMismatch {
                expected: n,
                got: valid.len(),
            });
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for (i, &row_valid) in valid.iter().enumerate() {
            if row_valid {
                for (j, &v) in lambda.row(i).iter().enumerate() {
                    if !v.is_finite() || v < 0.0 || (i == j && v != 0.0) {
                        return Err(ModelError::InvalidEntry {
                            what: "leverage",
                            row: i,
                            col: j,
                            value: v,
                        });
                    }
                    if v > 0.0 {
                        col_idx.push(j);
                        values.push(v);
                    }
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            values,
            valid,
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[row.clone()].binary_search(&j) {
            Ok(k) => self.values[row.start + k],
            Err(_) => 0.0,
        }
    }

    /// Non-zero entries of row `i` as `(column, value)` pairs.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let row = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[row.clone()]
            .iter()
            .copied()
            .zip(self.values[row].iter().copied())
    }

    /// `sum_j lambda_ij x_j` for row `i`.
    #[inline]
    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let row = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[row.clone()]
            .iter()
            .zip(&self.values[row])
            .map(|(&j, &v)| v * x[j])
            .sum()
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    /// Banks with positive initial equity, which take part in propagation.
    pub fn valid_rows(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.valid[i]).collect()
    }

    /// Banks with non-positive initial equity.
    pub fn defaulted_at_start(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| !self.valid[i]).collect()
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m.set(i, j, v);
            }
        }
        m
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).map(|(_, v)| v).sum())
            .collect()
    }
}

impl fmt::Display for LeverageMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n)
                .map(|j| format!("{:.6}", self.get(i, j)))
                .collect();
            writeln!(f, "[{}]", row.join(", "))?;
        }
        Ok(())
    }
}

/// `Lambda_ij = weights(i, j) / E_i(0)` for banks with positive equity; rows
/// of banks with non-positive equity are zero and those banks are reported as
/// defaulted at start.
pub fn build_leverage(
    system: &BankingSystem,
    network: &ExposureNetwork,
) -> Result<LeverageMatrix, ModelError> {
    let n = system.len();
    if network.dim() != n {
        return Err(ModelError::DimensionMismatch {
            expected: n,
            got: network.dim(),
        });
    }
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    let mut valid = Vec::with_capacity(n);
    row_ptr.push(0);
    for (i, bank) in system.banks().iter().enumerate() {
        let equity = bank.equity();
        let ok = equity > 0.0;
        valid.push(ok);
        if ok {
            for (j, &w) in network.weights().row(i).iter().enumerate() {
                if w > 0.0 {
                    col_idx.push(j);
                    values.push(w / equity);
                }
            }
        }
        row_ptr.push(col_idx.len());
    }
    Ok(LeverageMatrix {
        n,
        row_ptr,
        col_idx,
        values,
        valid,
    })
}
