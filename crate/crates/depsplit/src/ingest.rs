//! Parsing of SDI-shaped per-quarter CSV files, the filtering rules, feature
//! computation, and panel assembly with frozen normalization statistics.
//!
//! Input schema (header required, UTF-8, `.` decimal separator, one file per
//! quarter named `YYYYQ#.csv`):
//!
//! ```text
//! bank_id, domestic_deposits, n_offices, n_accounts, n_small_accounts,
//! deposits_small_accounts, res_construction_loans, res_real_estate_loans,
//! loans_to_individuals, total_loans
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::panel::{
    BankPanel, BankRecord, FeatureVector, FEATURE_NAMES, N_FEATURES, N_METRICS,
};
use crate::quarter::Quarter;
use crate::{Error, Result};

/// Deposit threshold of the bank filter, in thousands of dollars ($4.5M).
pub const MIN_DEPOSITS: f64 = 4_500.0;
/// Account-count threshold of the bank filter.
pub const MIN_ACCOUNTS: u64 = 250;

pub const SDI_COLUMNS: [&str; 10] = [
    "bank_id",
    "domestic_deposits",
    "n_offices",
    "n_accounts",
    "n_small_accounts",
    "deposits_small_accounts",
    "res_construction_loans",
    "res_real_estate_loans",
    "loans_to_individuals",
    "total_loans",
];

/// FDIC insurance limit per quarter, in thousands of dollars: $100,000 before
/// 2010-Q1 and $250,000 from 2010-Q1 on.
#[derive(Debug, Clone, PartialEq)]
pub struct InsuranceLimitSchedule {
    cutover: Quarter,
    before: f64,
    after: f64,
}

impl Default for InsuranceLimitSchedule {
    fn default() -> Self {
        InsuranceLimitSchedule {
            cutover: Quarter::new(2010, 1).expect("valid quarter"),
            before: 100.0,
            after: 250.0,
        }
    }
}

impl InsuranceLimitSchedule {
    pub fn limit(&self, quarter: Quarter) -> f64 {
        if quarter < self.cutover {
            self.before
        } else {
            self.after
        }
    }
}

/// Parses one per-quarter CSV into records. The retail-loan figure is the sum
/// of the three component columns.
pub fn parse_sdi_csv(path: &Path, quarter: Quarter) -> Result<Vec<BankRecord>> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;

    let headers = reader.headers()?.clone();
    let mut col_idx = [0usize; 10];
    for (i, name) in SDI_COLUMNS.iter().enumerate() {
        col_idx[i] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| Error::MissingColumn {
                path: display.clone(),
                column: name.to_string(),
            })?;
    }

    let mut records = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row?;
        // header is line 1; data starts at line 2
        let row_no = line + 2;
        let field = |i: usize| -> &str { row.get(col_idx[i]).unwrap_or("") };
        let parse_f64 = |i: usize| -> Result<f64> {
            field(i).parse::<f64>().map_err(|_| Error::ParseRow {
                path: display.clone(),
                row: row_no,
                msg: format!("column `{}`: `{}` is not a number", SDI_COLUMNS[i], field(i)),
            })
        };
        let parse_u64 = |i: usize| -> Result<u64> {
            field(i).parse::<u64>().map_err(|_| Error::ParseRow {
                path: display.clone(),
                row: row_no,
                msg: format!("column `{}`: `{}` is not a count", SDI_COLUMNS[i], field(i)),
            })
        };

        let res_construction = parse_f64(6)?;
        let res_real_estate = parse_f64(7)?;
        let loans_to_individuals = parse_f64(8)?;
        let record = BankRecord {
            bank_id: field(0).to_string(),
            quarter,
            domestic_deposits: parse_f64(1)?,
            n_offices: parse_u64(2)?,
            n_accounts: parse_u64(3)?,
            n_small_accounts: parse_u64(4)?,
            deposits_small_accounts: parse_f64(5)?,
            retail_loans: res_construction + res_real_estate + loans_to_individuals,
            total_loans: parse_f64(9)?,
        };
        for (name, v) in [
            ("res_construction_loans", res_construction),
            ("res_real_estate_loans", res_real_estate),
            ("loans_to_individuals", loans_to_individuals),
        ] {
            if v < 0.0 {
                return Err(Error::InvalidRecord {
                    path: display.clone(),
                    row: row_no,
                    msg: format!("negative {name}: {v}"),
                });
            }
        }
        record.validate().map_err(|msg| Error::InvalidRecord {
            path: display.clone(),
            row: row_no,
            msg,
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Drops banks below $4.5M deposits or 250 accounts. Both boundaries are
/// inclusive: a bank at exactly (4500, 250) is retained.
pub fn filter_banks(records: Vec<BankRecord>) -> Vec<BankRecord> {
    records
        .into_iter()
        .filter(|r| r.domestic_deposits >= MIN_DEPOSITS && r.n_accounts >= MIN_ACCOUNTS)
        .collect()
}

/// Natural-log and fractional features of one record. Callers must have
/// filtered first so the logs are defined.
pub fn compute_features(record: &BankRecord) -> FeatureVector {
    let deposits_per_office = if record.n_offices == 0 {
        // no reported office: treat the bank as a single implicit office
        record.domestic_deposits
    } else {
        record.domestic_deposits / record.n_offices as f64
    };
    let frac_retail_loans = if record.total_loans == 0.0 {
        0.0
    } else {
        record.retail_loans / record.total_loans
    };
    FeatureVector {
        log_deposits: record.domestic_deposits.ln(),
        log_deposits_per_office: deposits_per_office.ln(),
        log_accounts: (record.n_accounts as f64).ln(),
        frac_small_amount: record.deposits_small_accounts / record.domestic_deposits,
        frac_small_accounts: record.n_small_accounts as f64 / record.n_accounts as f64,
        frac_retail_loans,
    }
}

/// Mean/stddev of the three log features over unmasked cells, frozen at
/// training time and reused for inference panels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// How `build_panel` standardizes the log features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalize {
    /// Compute stats from this panel and apply them.
    Fit,
    /// Apply previously computed stats.
    Frozen(NormStats),
    /// Leave features raw.
    Off,
}

/// Assembles records into a dense panel. Log features are standardized over
/// unmasked cells (fractions stay in [0,1]); the metrics arrays hold total
/// deposits, deposits in small accounts, and the fraction of small accounts.
pub fn build_panel(
    records: &[BankRecord],
    normalize: Normalize,
) -> Result<(BankPanel, Option<NormStats>)> {
    if records.is_empty() {
        return Err(Error::InsufficientData("no records to build a panel from".into()));
    }
    let mut quarters: Vec<Quarter> = records.iter().map(|r| r.quarter).collect();
    quarters.sort();
    quarters.dedup();
    let mut banks: Vec<String> = records.iter().map(|r| r.bank_id.clone()).collect();
    banks.sort();
    banks.dedup();

    let bank_idx: BTreeMap<&str, usize> =
        banks.iter().enumerate().map(|(i, b)| (b.as_str(), i)).collect();
    let quarter_idx: BTreeMap<Quarter, usize> =
        quarters.iter().enumerate().map(|(i, &q)| (q, i)).collect();

    let (n_b, n_t) = (banks.len(), quarters.len());
    let mut features = Array3::zeros((n_b, n_t, N_FEATURES));
    let mut metrics = Array3::zeros((n_b, n_t, N_METRICS));
    let mut n_accounts = Array2::zeros((n_b, n_t));
    let mut mask = Array2::from_elem((n_b, n_t), false);

    for r in records {
        let b = bank_idx[r.bank_id.as_str()];
        let t = quarter_idx[&r.quarter];
        if mask[[b, t]] {
            return Err(Error::InvalidInput(format!(
                "duplicate record for bank `{}` in {}",
                r.bank_id, r.quarter
            )));
        }
        if r.domestic_deposits <= 0.0 || r.n_accounts == 0 {
            return Err(Error::InvalidInput(format!(
                "bank `{}` in {} has no deposits or accounts; filter before building the panel",
                r.bank_id, r.quarter
            )));
        }
        let f = compute_features(r).to_array();
        for (i, v) in f.into_iter().enumerate() {
            features[[b, t, i]] = v;
        }
        metrics[[b, t, 0]] = r.domestic_deposits;
        metrics[[b, t, 1]] = r.deposits_small_accounts;
        metrics[[b, t, 2]] = r.n_small_accounts as f64 / r.n_accounts as f64;
        n_accounts[[b, t]] = r.n_accounts as f64;
        mask[[b, t]] = true;
    }

    let stats = match normalize {
        Normalize::Off => None,
        Normalize::Frozen(stats) => {
            apply_norm(&mut features, &mask, &stats);
            Some(stats)
        }
        Normalize::Fit => {
            let mut mean = [0.0; 3];
            let mut std = [0.0; 3];
            let cells: Vec<(usize, usize)> = mask
                .indexed_iter()
                .filter_map(|((b, t), &m)| m.then_some((b, t)))
                .collect();
            let n = cells.len() as f64;
            for k in 0..3 {
                let m = cells.iter().map(|&(b, t)| features[[b, t, k]]).sum::<f64>() / n;
                let var = cells
                    .iter()
                    .map(|&(b, t)| (features[[b, t, k]] - m).powi(2))
                    .sum::<f64>()
                    / n;
                let s = var.sqrt();
                if cells.len() > 1 && s == 0.0 {
                    return Err(Error::ZeroVariance(FEATURE_NAMES[k].to_string()));
                }
                mean[k] = m;
                // single observation: bypass the zero stddev so the
                // standardized value comes out 0
                std[k] = if s == 0.0 { 1.0 } else { s };
            }
            let stats = NormStats { mean, std };
            apply_norm(&mut features, &mask, &stats);
            Some(stats)
        }
    };

    let panel = BankPanel {
        banks,
        quarters,
        features,
        metrics,
        n_accounts,
        mask,
    };
    Ok((panel, stats))
}

fn apply_norm(features: &mut Array3<f64>, mask: &Array2<bool>, stats: &NormStats) {
    for ((b, t), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        for k in 0..3 {
            features[[b, t, k]] = (features[[b, t, k]] - stats.mean[k]) / stats.std[k];
        }
    }
}
