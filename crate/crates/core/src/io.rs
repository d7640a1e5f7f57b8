//! Delimiter-separated file formats: balance sheets, sparse weight triplets
//! and the result tables written by the command-line driver.
//!
//! Reals are written with the shortest representation that parses back to
//! the same `f64`, so a write/read cycle is exact.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::experiment::{EnsembleResult, RunSummary, SweepResult};
use crate::model::{BalanceSheet, BankingSystem, ExposureNetwork, Matrix, ModelError};
use crate::reconstruction::ReconstructionSample;
use crate::stability::StabilityReport;

pub const BALANCE_SHEET_HEADER: [&str; 5] = [
    "bank_id",
    "total_assets",
    "total_liabilities",
    "interbank_assets",
    "interbank_liabilities",
];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}` in header")]
    MissingColumn(&'static str),
    #[error("row {row}, field `{field}`: cannot parse {value:?} ({reason})")]
    Parse {
        row: u64,
        field: &'static str,
        value: String,
        reason: String,
    },
    #[error("row {row}: {source}")]
    Row {
        row: u64,
        #[source]
        source: ModelError,
    },
    #[error("row {row}: duplicate bank id `{id}`")]
    DuplicateId { row: u64, id: String },
    #[error("row {row}: bank index {index} out of range for {n} banks")]
    IndexOutOfRange { row: u64, index: usize, n: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn open(path: &Path) -> Result<File, IoError> {
    File::open(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> Result<File, IoError> {
    File::create(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn column(headers: &csv::StringRecord, name: &'static str) -> Result<usize, IoError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or(IoError::MissingColumn(name))
}

fn parse_amount(
    record: &csv::StringRecord,
    idx: usize,
    field: &'static str,
    row: u64,
) -> Result<f64, IoError> {
    let raw = record.get(idx).unwrap_or("").trim();
    let parse_err = |reason: &str| IoError::Parse {
        row,
        field,
        value: raw.to_string(),
        reason: reason.to_string(),
    };
    if raw.is_empty() {
        return Err(parse_err("missing value"));
    }
    let value: f64 = raw
        .parse()
        .map_err(|e: std::num::ParseFloatError| parse_err(&e.to_string()))?;
    if !value.is_finite() || value < 0.0 {
        return Err(parse_err("must be a finite non-negative number"));
    }
    Ok(value)
}

/// Reads a balance-sheet table; rows are numbered from 1 after the header.
pub fn read_balance_sheets<R: Read>(reader: R) -> Result<BankingSystem, IoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = [
        column(&headers, "bank_id")?,
        column(&headers, "total_assets")?,
        column(&headers, "total_liabilities")?,
        column(&headers, "interbank_assets")?,
        column(&headers, "interbank_liabilities")?,
    ];
    let mut banks: Vec<BalanceSheet> = Vec::new();
    let mut ids = std::collections::HashSet::new();
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        let row = k as u64 + 1;
        let id = record.get(cols[0]).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(IoError::Parse {
                row,
                field: "bank_id",
                value: id,
                reason: "missing value".into(),
            });
        }
        if !ids.insert(id.clone()) {
            return Err(IoError::DuplicateId { row, id });
        }
        let sheet = BalanceSheet {
            bank_id: id,
            total_assets: parse_amount(&record, cols[1], "total_assets", row)?,
            total_liabilities: parse_amount(&record, cols[2], "total_liabilities", row)?,
            interbank_assets: parse_amount(&record, cols[3], "interbank_assets", row)?,
            interbank_liabilities: parse_amount(&record, cols[4], "interbank_liabilities", row)?,
        };
        sheet
            .validate()
            .map_err(|source| IoError::Row { row, source })?;
        banks.push(sheet);
    }
    Ok(BankingSystem::new(banks, None)?)
}

pub fn load_balance_sheets(path: impl AsRef<Path>) -> Result<BankingSystem, IoError> {
    read_balance_sheets(open(path.as_ref())?)
}

pub fn write_balance_sheets<W: Write>(system: &BankingSystem, writer: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(BALANCE_SHEET_HEADER)?;
    for b in system.banks() {
        w.write_record([
            b.bank_id.clone(),
            b.total_assets.to_string(),
            b.total_liabilities.to_string(),
            b.interbank_assets.to_string(),
            b.interbank_liabilities.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn save_balance_sheets(system: &BankingSystem, path: impl AsRef<Path>) -> Result<(), IoError> {
    write_balance_sheets(system, create(path.as_ref())?)
}

/// Reads `i,j,weight` triplets into an `n x n` exposure network. Repeated
/// pairs are summed.
pub fn read_network<R: Read>(reader: R, n: usize) -> Result<ExposureNetwork, IoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let ci = column(&headers, "i")?;
    let cj = column(&headers, "j")?;
    let cw = column(&headers, "weight")?;
    let mut m = Matrix::zeros(n);
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        let row = k as u64 + 1;
        let index = |idx: usize, field: &'static str| -> Result<usize, IoError> {
            let raw = record.get(idx).unwrap_or("");
            let v: usize = raw
                .parse()
                .map_err(|e: std::num::ParseIntError| IoError::Parse {
                    row,
                    field,
                    value: raw.to_string(),
                    reason: e.to_string(),
                })?;
            if v >= n {
                return Err(IoError::IndexOutOfRange { row, index: v, n });
            }
            Ok(v)
        };
        let i = index(ci, "i")?;
        let j = index(cj, "j")?;
        let w = parse_amount(&record, cw, "weight", row)?;
        m.set(i, j, m.get(i, j) + w);
    }
    Ok(ExposureNetwork::new(m)?)
}

pub fn load_network(path: impl AsRef<Path>, n: usize) -> Result<ExposureNetwork, IoError> {
    read_network(open(path.as_ref())?, n)
}

pub fn write_network<W: Write>(network: &ExposureNetwork, writer: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["i", "j", "weight"])?;
    for (i, j, x) in network.triplets() {
        w.write_record([i.to_string(), j.to_string(), x.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Sparse weights of every sample as `sample,i,j,weight`.
pub fn write_ensemble_weights<W: Write>(
    samples: &[ReconstructionSample],
    writer: W,
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["sample", "i", "j", "weight"])?;
    for (k, s) in samples.iter().enumerate() {
        for (i, j, x) in s.weights.triplets() {
            w.write_record([k.to_string(), i.to_string(), j.to_string(), x.to_string()])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_reconstruction_table<W: Write>(
    samples: &[ReconstructionSample],
    writer: W,
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "sample",
        "seed",
        "attempts",
        "edges",
        "density",
        "ras_residual",
        "ras_iterations",
        "converged",
        "repaired_edges",
    ])?;
    for (k, s) in samples.iter().enumerate() {
        w.write_record([
            k.to_string(),
            s.seed.to_string(),
            s.attempts.to_string(),
            s.adjacency.edge_count().to_string(),
            s.adjacency.density().to_string(),
            s.ras_residual.to_string(),
            s.ras_iterations.to_string(),
            s.converged.to_string(),
            s.repaired_edges.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// `t, S, D, H` with standard errors.
pub fn write_trajectory_table<W: Write>(result: &EnsembleResult, writer: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "S", "S_stderr", "D", "D_stderr", "H", "H_stderr"])?;
    for p in &result.series {
        w.write_record([
            p.t.to_string(),
            p.stressed.mean.to_string(),
            p.stressed.stderr.to_string(),
            p.defaulted.mean.to_string(),
            p.defaulted.stderr.to_string(),
            p.loss.mean.to_string(),
            p.loss.stderr.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_runs_table<W: Write>(runs: &[RunSummary], writer: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "network",
        "realization",
        "H_initial",
        "H_inf",
        "steps",
        "converged",
    ])?;
    for r in runs {
        w.write_record([
            r.network.to_string(),
            r.realization.to_string(),
            r.initial_h.to_string(),
            r.final_h.to_string(),
            r.steps.to_string(),
            r.converged.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_surface_table<W: Write>(sweep: &SweepResult, writer: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "alpha",
        "x_shock",
        "mean_H_inf",
        "stderr_H_inf",
        "n_nonconverged",
    ])?;
    for c in &sweep.cells {
        w.write_record([
            c.alpha.to_string(),
            c.x_shock.to_string(),
            c.mean_h_inf.to_string(),
            c.stderr_h_inf.to_string(),
            c.n_nonconverged.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_stability_table<W: Write>(
    reports: &[(usize, StabilityReport)],
    writer: W,
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "sample",
        "lambda_max",
        "alpha_critical",
        "iterations",
        "residual",
        "converged",
    ])?;
    for (k, r) in reports {
        w.write_record([
            k.to_string(),
            r.lambda_max.to_string(),
            r.alpha_critical.to_string(),
            r.iterations.to_string(),
            r.residual.to_string(),
            r.converged.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Writes a table to `path` with one of the writers above.
pub fn write_file<F>(path: impl AsRef<Path>, f: F) -> Result<(), IoError>
where
    F: FnOnce(File) -> Result<(), IoError>,
{
    f(create(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_BANKS: &str =
        "bank_id,total_assets,total_liabilities,interbank_assets,interbank_liabilities\n\
                             a,100,80,20,10\n\
                             b,50,45,5,10\n";

    #[test]
    fn reads_valid_file() {
        let sys = read_balance_sheets(TWO_BANKS.as_bytes()).unwrap();
        assert_eq!(sys.len(), 2);
        assert_eq!(sys.banks()[0].equity(), 20.0);
    }

    #[test]
    fn columns_may_be_reordered() {
        let text =
            "interbank_liabilities,bank_id,interbank_assets,total_liabilities,total_assets\n\
                    10,a,20,80,100\n10,b,5,45,50\n";
        let sys = read_balance_sheets(text.as_bytes()).unwrap();
        assert_eq!(sys, read_balance_sheets(TWO_BANKS.as_bytes()).unwrap());
    }

    #[test]
    fn inconsistent_row_is_named() {
        let text =
            "bank_id,total_assets,total_liabilities,interbank_assets,interbank_liabilities\n\
                    a,100,80,20,10\nb,100,80,120,10\n";
        match read_balance_sheets(text.as_bytes()).unwrap_err() {
            IoError::Row { row, source } => {
                assert_eq!(row, 2);
                assert!(matches!(source, ModelError::InconsistentRecord { .. }));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn header_only_is_too_small() {
        let err =
            read_balance_sheets(&BALANCE_SHEET_HEADER.join(",").into_bytes()[..]).unwrap_err();
        assert!(matches!(err, IoError::Model(ModelError::TooFewBanks(0))));
        assert!(matches!(
            read_balance_sheets(&b""[..]).unwrap_err(),
            IoError::MissingColumn(_)
        ));
    }

    #[test]
    fn parse_and_duplicate_errors() {
        let text =
            "bank_id,total_assets,total_liabilities,interbank_assets,interbank_liabilities\n\
                    a,100,80,x,10\n";
        assert!(matches!(
            read_balance_sheets(text.as_bytes()).unwrap_err(),
            IoError::Parse {
                row: 1,
                field: "interbank_assets",
                ..
            }
        ));
        let text =
            "bank_id,total_assets,total_liabilities,interbank_assets,interbank_liabilities\n\
                    a,100,80,1,10\na,100,80,1,10\n";
        assert!(matches!(
            read_balance_sheets(text.as_bytes()).unwrap_err(),
            IoError::DuplicateId { row: 2, .. }
        ));
        let text =
            "bank_id,total_assets,total_liabilities,interbank_assets,interbank_liabilities\n\
                    a,100,80,-1,10\n";
        assert!(matches!(
            read_balance_sheets(text.as_bytes()).unwrap_err(),
            IoError::Parse { .. }
        ));
    }

    #[test]
    fn network_triplets_round_trip() {
        let m = Matrix::from_rows(&[
            vec![0.0, 1.5, 0.0],
            vec![0.25, 0.0, 0.0],
            vec![0.0, 3.0, 0.0],
        ])
        .unwrap();
        let net = ExposureNetwork::new(m).unwrap();
        let mut buf = Vec::new();
        write_network(&net, &mut buf).unwrap();
        assert_eq!(read_network(&buf[..], 3).unwrap(), net);
        let bad = "i,j,weight\n0,5,1\n";
        assert!(matches!(
            read_network(bad.as_bytes(), 3).unwrap_err(),
            IoError::IndexOutOfRange { index: 5, .. }
        ));
        assert!(read_network("i,j,weight\n1,1,2\n".as_bytes(), 3).is_err());
    }
}
