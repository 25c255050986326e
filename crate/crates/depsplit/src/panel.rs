//! Shared domain types. Money fields are in thousands of dollars throughout
//! and all logs are natural logs, matching the input data convention.

use std::collections::HashSet;

use ndarray::{Array2, Array3};

use crate::quarter::Quarter;
use crate::{Error, Result};

pub const N_FEATURES: usize = 6;
pub const N_METRICS: usize = 3;

/// Indices into the metrics axis of [`BankPanel::metrics`].
pub const METRIC_TOTAL_DEPOSITS: usize = 0;
pub const METRIC_SMALL_DEPOSITS: usize = 1;
pub const METRIC_FRAC_SMALL_ACCOUNTS: usize = 2;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "log_deposits",
    "log_deposits_per_office",
    "log_accounts",
    "frac_small_amount",
    "frac_small_accounts",
    "frac_retail_loans",
];

/// One bank-quarter row of the SDI-shaped input.
#[derive(Debug, Clone, PartialEq)]
pub struct BankRecord {
    pub bank_id: String,
    pub quarter: Quarter,
    /// Total domestic deposits (thousands of dollars).
    pub domestic_deposits: f64,
    pub n_offices: u64,
    pub n_accounts: u64,
    /// Accounts below the insurance limit.
    pub n_small_accounts: u64,
    /// Deposits held in accounts below the insurance limit (thousands).
    pub deposits_small_accounts: f64,
    /// Sum of residential construction loans, residential real estate loans,
    /// and loans to individuals (thousands).
    pub retail_loans: f64,
    pub total_loans: f64,
}

impl BankRecord {
    /// Checks cross-field invariants, returning a message for the first
    /// violation found.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let money = [
            ("domestic_deposits", self.domestic_deposits),
            ("deposits_small_accounts", self.deposits_small_accounts),
            ("retail_loans", self.retail_loans),
            ("total_loans", self.total_loans),
        ];
        for (name, v) in money {
            if !v.is_finite() {
                return Err(format!("non-finite {name}: {v}"));
            }
            if v < 0.0 {
                return Err(format!("negative {name}: {v}"));
            }
        }
        if self.n_small_accounts > self.n_accounts {
            return Err(format!(
                "n_small_accounts ({}) exceeds n_accounts ({})",
                self.n_small_accounts, self.n_accounts
            ));
        }
        if self.deposits_small_accounts > self.domestic_deposits {
            return Err(format!(
                "deposits_small_accounts ({}) exceeds domestic_deposits ({})",
                self.deposits_small_accounts, self.domestic_deposits
            ));
        }
        Ok(())
    }
}

/// Per-record model inputs derived from a [`BankRecord`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub log_deposits: f64,
    pub log_deposits_per_office: f64,
    pub log_accounts: f64,
    pub frac_small_amount: f64,
    pub frac_small_accounts: f64,
    pub frac_retail_loans: f64,
}

impl FeatureVector {
    pub fn to_array(self) -> [f64; N_FEATURES] {
        [
            self.log_deposits,
            self.log_deposits_per_office,
            self.log_accounts,
            self.frac_small_amount,
            self.frac_small_accounts,
            self.frac_retail_loans,
        ]
    }
}

/// Dense bank-by-quarter panel with a presence mask. Masked-out cells hold
/// zeros so no NaN can leak into a loss computation.
#[derive(Debug, Clone)]
pub struct BankPanel {
    pub banks: Vec<String>,
    /// Strictly increasing.
    pub quarters: Vec<Quarter>,
    /// `[n_banks, n_quarters, N_FEATURES]`
    pub features: Array3<f64>,
    /// `[n_banks, n_quarters, N_METRICS]`: total deposits, deposits in small
    /// accounts, fraction of small accounts.
    pub metrics: Array3<f64>,
    /// `[n_banks, n_quarters]`
    pub n_accounts: Array2<f64>,
    /// `[n_banks, n_quarters]`, true when the bank reports in that quarter.
    pub mask: Array2<bool>,
}

impl BankPanel {
    pub fn n_banks(&self) -> usize {
        self.banks.len()
    }

    pub fn n_quarters(&self) -> usize {
        self.quarters.len()
    }

    pub fn bank_index(&self, bank_id: &str) -> Option<usize> {
        self.banks.iter().position(|b| b == bank_id)
    }

    /// Number of unmasked (bank, quarter) cells.
    pub fn present_cells(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Restricts the panel to the given banks, keeping all quarters.
    /// Unknown ids are reported as an error.
    pub fn select_banks(&self, bank_ids: &[String]) -> Result<BankPanel> {
        let wanted: HashSet<&str> = bank_ids.iter().map(|s| s.as_str()).collect();
        for id in &wanted {
            if !self.banks.iter().any(|b| b == id) {
                return Err(Error::InvalidInput(format!("unknown bank id `{id}`")));
            }
        }
        let keep: Vec<usize> = (0..self.n_banks())
            .filter(|&b| wanted.contains(self.banks[b].as_str()))
            .collect();
        let n_t = self.n_quarters();
        let mut features = Array3::zeros((keep.len(), n_t, N_FEATURES));
        let mut metrics = Array3::zeros((keep.len(), n_t, N_METRICS));
        let mut n_accounts = Array2::zeros((keep.len(), n_t));
        let mut mask = Array2::from_elem((keep.len(), n_t), false);
        for (row, &b) in keep.iter().enumerate() {
            features
                .index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.features.index_axis(ndarray::Axis(0), b));
            metrics
                .index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.metrics.index_axis(ndarray::Axis(0), b));
            n_accounts
                .index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.n_accounts.index_axis(ndarray::Axis(0), b));
            mask.index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.mask.index_axis(ndarray::Axis(0), b));
        }
        Ok(BankPanel {
            banks: keep.iter().map(|&b| self.banks[b].clone()).collect(),
            quarters: self.quarters.clone(),
            features,
            metrics,
            n_accounts,
            mask,
        })
    }
}

/// The five mixture parameters per (bank, quarter) cell.
#[derive(Debug, Clone)]
pub struct MixtureParams {
    /// Fraction of retail accounts, in (0, 1).
    pub p: Array2<f64>,
    pub mu_ret: Array2<f64>,
    /// Log-scale standard deviation of the retail distribution, > 0.
    pub sigma_ret: Array2<f64>,
    pub mu_ws: Array2<f64>,
    pub sigma_ws: Array2<f64>,
}

impl MixtureParams {
    pub fn zeros(n_banks: usize, n_quarters: usize) -> Self {
        let shape = (n_banks, n_quarters);
        MixtureParams {
            p: Array2::zeros(shape),
            mu_ret: Array2::zeros(shape),
            sigma_ret: Array2::zeros(shape),
            mu_ws: Array2::zeros(shape),
            sigma_ws: Array2::zeros(shape),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.p.dim()
    }
}

/// Endpoints of the per-quarter prior means/stddevs, interpolated linearly
/// across the training window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorEndpoints {
    pub mu_ret: (f64, f64),
    pub sigma_ret: (f64, f64),
    pub mu_ws: (f64, f64),
    pub sigma_ws: (f64, f64),
}

impl Default for PriorEndpoints {
    fn default() -> Self {
        PriorEndpoints {
            mu_ret: (1.2, 1.5),
            sigma_ret: (1.3, 1.5),
            mu_ws: (4.5, 5.0),
            sigma_ws: (3.0, 3.5),
        }
    }
}

/// Per-quarter prior means and stddevs for both distributions, plus the
/// constraint weight lambda. Varies over timesteps but not over banks.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSchedule {
    pub mu0_ret: Vec<f64>,
    pub sigma0_ret: Vec<f64>,
    pub mu0_ws: Vec<f64>,
    pub sigma0_ws: Vec<f64>,
    pub lambda: f64,
}

impl PriorSchedule {
    /// Linear interpolation of each endpoint pair over `n_quarters` steps.
    /// With a single quarter the start value is used.
    pub fn linear(n_quarters: usize, endpoints: PriorEndpoints, lambda: f64) -> Result<Self> {
        if n_quarters == 0 {
            return Err(Error::InvalidInput("prior schedule needs at least one quarter".into()));
        }
        let interp = |(a, b): (f64, f64)| -> Vec<f64> {
            (0..n_quarters)
                .map(|t| {
                    if n_quarters == 1 {
                        a
                    } else {
                        a + (b - a) * t as f64 / (n_quarters - 1) as f64
                    }
                })
                .collect()
        };
        let schedule = PriorSchedule {
            mu0_ret: interp(endpoints.mu_ret),
            sigma0_ret: interp(endpoints.sigma_ret),
            mu0_ws: interp(endpoints.mu_ws),
            sigma0_ws: interp(endpoints.sigma_ws),
            lambda,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn n_quarters(&self) -> usize {
        self.mu0_ret.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidInput(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        for t in 0..self.n_quarters() {
            if self.sigma0_ret[t] <= 0.0 || self.sigma0_ws[t] <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "prior stddevs must be positive at timestep {t}"
                )));
            }
            if self.mu0_ws[t] <= self.mu0_ret[t] {
                return Err(Error::InvalidInput(format!(
                    "wholesale prior mean must exceed retail prior mean at timestep {t}"
                )));
            }
        }
        Ok(())
    }
}
