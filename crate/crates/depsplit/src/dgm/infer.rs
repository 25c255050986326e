//! Retail-deposit inference from trained networks and industry aggregation.
//! Monte Carlo inference averages the deposit estimates over independent
//! trials; analytic mode replaces the sample mean by its expectation.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{parameterize, DgmConfig, DgmNets, MetricMode, TAG_INFER};
use crate::panel::BankPanel;
use crate::quarter::Quarter;
use crate::{Error, Result};

/// Per-cell deposit estimates. Retail plus wholesale equals the model's
/// simulated total by construction. Masked cells hold zeros.
#[derive(Debug, Clone)]
pub struct RetailEstimate {
    pub retail_deposits: Array2<f64>,
    pub wholesale_deposits: Array2<f64>,
    pub retail_fraction: Array2<f64>,
    /// Stddev of the retail estimate across inference trials (zero in
    /// analytic mode, where every trial coincides).
    pub retail_trial_sd: Array2<f64>,
}

impl RetailEstimate {
    /// Writes `bank_id, quarter, retail_deposits, wholesale_deposits,
    /// retail_fraction`, one row per unmasked cell.
    pub fn write_csv(&self, panel: &BankPanel, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(
            f,
            "bank_id,quarter,retail_deposits,wholesale_deposits,retail_fraction"
        )?;
        for b in 0..panel.n_banks() {
            for t in 0..panel.n_quarters() {
                if !panel.mask[[b, t]] {
                    continue;
                }
                writeln!(
                    f,
                    "{},{},{},{},{}",
                    panel.banks[b],
                    panel.quarters[t],
                    self.retail_deposits[[b, t]],
                    self.wholesale_deposits[[b, t]],
                    self.retail_fraction[[b, t]]
                )?;
            }
        }
        Ok(())
    }
}

struct CellEstimate {
    retail: f64,
    wholesale: f64,
    fraction: f64,
    trial_sd: f64,
}

/// Retail/wholesale deposit estimates for every unmasked cell. The panel may
/// contain banks never seen in training; only its (frozen-normalized)
/// features, account counts and mask are used.
pub fn infer_retail(nets: &DgmNets, panel: &BankPanel, cfg: &DgmConfig) -> Result<RetailEstimate> {
    cfg.validate()?;
    let params = parameterize(nets, &panel.features)?;
    let (n_b, n_t) = params.dim();

    let cells: Vec<Option<CellEstimate>> = (0..n_b * n_t)
        .into_par_iter()
        .map(|c| {
            let (b, t) = (c / n_t, c % n_t);
            if !panel.mask[[b, t]] {
                return None;
            }
            let p = params.p[[b, t]];
            let n_accounts = panel.n_accounts[[b, t]];
            let (retail, wholesale, trial_sd) = match cfg.metric_mode {
                MetricMode::Analytic => {
                    let m_ret =
                        (params.mu_ret[[b, t]] + 0.5 * params.sigma_ret[[b, t]].powi(2)).exp();
                    let m_ws = (params.mu_ws[[b, t]] + 0.5 * params.sigma_ws[[b, t]].powi(2)).exp();
                    (n_accounts * p * m_ret, n_accounts * (1.0 - p) * m_ws, 0.0)
                }
                MetricMode::MonteCarlo => {
                    let inv = 1.0 / cfg.n_samples as f64;
                    let mut retail_trials = Vec::with_capacity(cfg.n_inference_trials);
                    let mut wholesale_sum = 0.0;
                    for trial in 0..cfg.n_inference_trials {
                        let mut sums = [0.0f64; 2];
                        for (comp, sum) in sums.iter_mut().enumerate() {
                            let (mu, sigma) = if comp == 0 {
                                (params.mu_ret[[b, t]], params.sigma_ret[[b, t]])
                            } else {
                                (params.mu_ws[[b, t]], params.sigma_ws[[b, t]])
                            };
                            let mut rng = crate::rng::derive(
                                cfg.seed,
                                &[TAG_INFER, trial as u64, c as u64, comp as u64],
                            );
                            for _ in 0..cfg.n_samples {
                                let eps: f64 = rng.sample(StandardNormal);
                                *sum += (mu + sigma * eps).exp();
                            }
                        }
                        retail_trials.push(n_accounts * p * sums[0] * inv);
                        wholesale_sum += n_accounts * (1.0 - p) * sums[1] * inv;
                    }
                    let k = cfg.n_inference_trials as f64;
                    let retail = retail_trials.iter().sum::<f64>() / k;
                    let sd = if cfg.n_inference_trials > 1 {
                        (retail_trials.iter().map(|r| (r - retail).powi(2)).sum::<f64>()
                            / (k - 1.0))
                            .sqrt()
                    } else {
                        0.0
                    };
                    (retail, wholesale_sum / k, sd)
                }
            };
            let fraction = if retail + wholesale > 0.0 {
                retail / (retail + wholesale)
            } else {
                // zero-account cell: fall back to the account fraction
                p
            };
            Some(CellEstimate {
                retail,
                wholesale,
                fraction,
                trial_sd,
            })
        })
        .collect();

    let mut est = RetailEstimate {
        retail_deposits: Array2::zeros((n_b, n_t)),
        wholesale_deposits: Array2::zeros((n_b, n_t)),
        retail_fraction: Array2::zeros((n_b, n_t)),
        retail_trial_sd: Array2::zeros((n_b, n_t)),
    };
    for (c, cell) in cells.iter().enumerate() {
        let Some(cell) = cell else { continue };
        let (b, t) = (c / n_t, c % n_t);
        if !cell.retail.is_finite() || !cell.wholesale.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite estimate for bank `{}` in {}",
                panel.banks[b], panel.quarters[t]
            )));
        }
        est.retail_deposits[[b, t]] = cell.retail;
        est.wholesale_deposits[[b, t]] = cell.wholesale;
        est.retail_fraction[[b, t]] = cell.fraction;
        est.retail_trial_sd[[b, t]] = cell.trial_sd;
    }
    Ok(est)
}

/// Per-quarter industry totals over unmasked banks.
#[derive(Debug, Clone, PartialEq)]
pub struct IndustrySeries {
    pub quarters: Vec<Quarter>,
    pub retail: Vec<f64>,
    pub wholesale: Vec<f64>,
    pub retail_fraction: Vec<f64>,
}

pub const INDUSTRY_COLUMNS: [&str; 4] = ["quarter", "retail", "wholesale", "retail_fraction"];

impl IndustrySeries {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "{}", INDUSTRY_COLUMNS.join(","))?;
        for t in 0..self.quarters.len() {
            writeln!(
                f,
                "{},{},{},{}",
                self.quarters[t], self.retail[t], self.wholesale[t], self.retail_fraction[t]
            )?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<IndustrySeries> {
        let display = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)?;
        let headers = reader.headers()?.clone();
        let mut col_idx = [0usize; 4];
        for (i, name) in INDUSTRY_COLUMNS.iter().enumerate() {
            col_idx[i] = headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| Error::MissingColumn {
                    path: display.clone(),
                    column: name.to_string(),
                })?;
        }
        let mut out = IndustrySeries {
            quarters: Vec::new(),
            retail: Vec::new(),
            wholesale: Vec::new(),
            retail_fraction: Vec::new(),
        };
        for (line, row) in reader.records().enumerate() {
            let row = row?;
            let row_no = line + 2;
            let get = |i: usize| row.get(col_idx[i]).unwrap_or("");
            let quarter: Quarter = get(0).parse().map_err(|_| Error::ParseRow {
                path: display.clone(),
                row: row_no,
                msg: format!("column `quarter`: `{}` is not a quarter", get(0)),
            })?;
            let num = |i: usize| -> Result<f64> {
                get(i).parse().map_err(|_| Error::ParseRow {
                    path: display.clone(),
                    row: row_no,
                    msg: format!("column `{}`: `{}` is not a number", INDUSTRY_COLUMNS[i], get(i)),
                })
            };
            out.quarters.push(quarter);
            out.retail.push(num(1)?);
            out.wholesale.push(num(2)?);
            out.retail_fraction.push(num(3)?);
        }
        Ok(out)
    }
}

/// Sums estimates over unmasked banks per quarter.
pub fn aggregate_industry(est: &RetailEstimate, panel: &BankPanel) -> IndustrySeries {
    let n_t = panel.n_quarters();
    let mut retail = vec![0.0; n_t];
    let mut wholesale = vec![0.0; n_t];
    for b in 0..panel.n_banks() {
        for t in 0..n_t {
            if panel.mask[[b, t]] {
                retail[t] += est.retail_deposits[[b, t]];
                wholesale[t] += est.wholesale_deposits[[b, t]];
            }
        }
    }
    let retail_fraction = retail
        .iter()
        .zip(&wholesale)
        .map(|(r, w)| if r + w > 0.0 { r / (r + w) } else { 0.0 })
        .collect();
    IndustrySeries {
        quarters: panel.quarters.clone(),
        retail,
        wholesale,
        retail_fraction,
    }
}
