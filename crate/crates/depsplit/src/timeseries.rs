//! Four-lag, zero-bias linear regression on quarter-over-quarter differences:
//! predicts changes in retail and wholesale deposits from changes in
//! reserves, total loans, and retail loans. Regression runs through the
//! origin so every predicted change is attributed to the inputs.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::quarter::Quarter;
use crate::{Error, Result};

pub const N_MACRO_FEATURES: usize = 3;
pub const N_TARGETS: usize = 2;
pub const DEFAULT_LAGS: usize = 4;

pub const MACRO_COLUMNS: [&str; 4] = ["quarter", "reserves", "total_loans", "retail_loans"];
pub const MACRO_FEATURE_NAMES: [&str; N_MACRO_FEATURES] = ["reserves", "total_loans", "retail_loans"];
pub const TARGET_NAMES: [&str; N_TARGETS] = ["retail", "wholesale"];

/// Macro input levels, in thousands of dollars, on a gap-free quarter axis.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroSeries {
    pub quarters: Vec<Quarter>,
    pub reserves: Vec<f64>,
    pub total_loans: Vec<f64>,
    pub retail_loans: Vec<f64>,
}

impl MacroSeries {
    pub fn len(&self) -> usize {
        self.quarters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quarters.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        match i {
            0 => &self.reserves,
            1 => &self.total_loans,
            _ => &self.retail_loans,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reserves.len() != self.len()
            || self.total_loans.len() != self.len()
            || self.retail_loans.len() != self.len()
        {
            return Err(Error::Shape("macro series columns have unequal lengths".into()));
        }
        for w in self.quarters.windows(2) {
            if w[1].ordinal() != w[0].ordinal() + 1 {
                return Err(Error::InvalidInput(format!(
                    "macro series quarters must be contiguous and increasing; {} follows {}",
                    w[1], w[0]
                )));
            }
        }
        Ok(())
    }

    /// Reads `quarter, reserves, total_loans, retail_loans` levels.
    pub fn read_csv(path: &Path) -> Result<MacroSeries> {
        let display = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)?;
        let headers = reader.headers()?.clone();
        let mut col_idx = [0usize; 4];
        for (i, name) in MACRO_COLUMNS.iter().enumerate() {
            col_idx[i] = headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| Error::MissingColumn {
                    path: display.clone(),
                    column: name.to_string(),
                })?;
        }
        let mut series = MacroSeries {
            quarters: Vec::new(),
            reserves: Vec::new(),
            total_loans: Vec::new(),
            retail_loans: Vec::new(),
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
                    msg: format!("column `{}`: `{}` is not a number", MACRO_COLUMNS[i], get(i)),
                })
            };
            series.quarters.push(quarter);
            series.reserves.push(num(1)?);
            series.total_loans.push(num(2)?);
            series.retail_loans.push(num(3)?);
        }
        series.validate()?;
        Ok(series)
    }
}

/// Fitted lag weights `[target, feature, lag]` with lag index 0 the most
/// recent one. The bias is identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LagRegression {
    pub weights: Array3<f64>,
}

impl LagRegression {
    pub fn n_lags(&self) -> usize {
        self.weights.dim().2
    }

    /// Predicts (retail diff, wholesale diff) from lagged macro diffs;
    /// `lags[0]` is the most recent lag. Requires exactly `n_lags` entries.
    pub fn predict(&self, lags: &[[f64; N_MACRO_FEATURES]]) -> Result<[f64; N_TARGETS]> {
        if lags.len() != self.n_lags() {
            return Err(Error::Shape(format!(
                "expected {} lag vectors, got {}",
                self.n_lags(),
                lags.len()
            )));
        }
        let mut out = [0.0; N_TARGETS];
        for (target, slot) in out.iter_mut().enumerate() {
            for f in 0..N_MACRO_FEATURES {
                for (lag, vals) in lags.iter().enumerate() {
                    *slot += self.weights[[target, f, lag]] * vals[f];
                }
            }
        }
        Ok(out)
    }
}

/// Quarter-over-quarter level differences: `diff[t] = level[t+1] - level[t]`,
/// one shorter than the input.
pub fn qq_diff(levels: &[f64]) -> Result<Vec<f64>> {
    if levels.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "q/q differences need at least 2 points, got {}",
            levels.len()
        )));
    }
    Ok(levels.windows(2).map(|w| w[1] - w[0]).collect())
}

/// Design matrix rows plus targets. `prediction_quarters[i]` is the quarter
/// whose diff row `i` predicts.
#[derive(Debug, Clone)]
pub struct Design {
    /// `[cases, N_MACRO_FEATURES * n_lags]`, feature-major then lag.
    pub x: Array2<f64>,
    /// `[cases, N_TARGETS]`
    pub y: Array2<f64>,
    pub prediction_quarters: Vec<Quarter>,
    pub n_lags: usize,
}

/// Builds lagged design rows over aligned diff series. `diff_quarters[i]` is
/// the quarter over which diff `i` ran. By default the inputs for predicting
/// quarter `t` are the four completed diffs ending at its start;
/// `include_current` shifts the window to include quarter `t`'s own diff,
/// mirroring the use of nearly-complete weekly data for the current quarter.
pub fn build_design(
    macro_diffs: &Array2<f64>,
    target_diffs: &Array2<f64>,
    diff_quarters: &[Quarter],
    n_lags: usize,
    include_current: bool,
) -> Result<Design> {
    let n = diff_quarters.len();
    if macro_diffs.dim() != (n, N_MACRO_FEATURES) || target_diffs.dim() != (n, N_TARGETS) {
        return Err(Error::Shape(format!(
            "diff arrays must be [{n}, {N_MACRO_FEATURES}] and [{n}, {N_TARGETS}]; got {:?} and {:?}",
            macro_diffs.dim(),
            target_diffs.dim()
        )));
    }
    if n_lags == 0 {
        return Err(Error::InvalidInput("n_lags must be at least 1".into()));
    }
    // most recent input for row i is diff i-1, or diff i with include_current
    let shift = if include_current { 0 } else { 1 };
    let first = n_lags + shift - 1;
    if first >= n {
        let first_usable = Quarter::from_ordinal(diff_quarters[0].ordinal() + first as i64);
        return Err(Error::InsufficientData(format!(
            "not enough history for {n_lags} lags: first usable prediction quarter is {first_usable}, \
             but the series ends at {}",
            diff_quarters[n - 1]
        )));
    }
    let cases = n - first;
    let mut x = Array2::zeros((cases, N_MACRO_FEATURES * n_lags));
    let mut y = Array2::zeros((cases, N_TARGETS));
    let mut prediction_quarters = Vec::with_capacity(cases);
    for (row, i) in (first..n).enumerate() {
        for f in 0..N_MACRO_FEATURES {
            for lag in 0..n_lags {
                x[[row, f * n_lags + lag]] = macro_diffs[[i - shift - lag, f]];
            }
        }
        for target in 0..N_TARGETS {
            y[[row, target]] = target_diffs[[i, target]];
        }
        prediction_quarters.push(diff_quarters[i]);
    }
    Ok(Design {
        x,
        y,
        prediction_quarters,
        n_lags,
    })
}

/// Aligns macro and deposit level series on their common quarter range and
/// builds the lagged design from their diffs.
pub fn prepare_design(
    macro_series: &MacroSeries,
    deposit_quarters: &[Quarter],
    retail: &[f64],
    wholesale: &[f64],
    n_lags: usize,
    include_current: bool,
) -> Result<Design> {
    macro_series.validate()?;
    if deposit_quarters.len() != retail.len() || deposit_quarters.len() != wholesale.len() {
        return Err(Error::Shape("deposit series lengths differ".into()));
    }
    for w in deposit_quarters.windows(2) {
        if w[1].ordinal() != w[0].ordinal() + 1 {
            return Err(Error::InvalidInput(format!(
                "deposit quarters must be contiguous; {} follows {}",
                w[1], w[0]
            )));
        }
    }
    if macro_series.is_empty() || deposit_quarters.is_empty() {
        return Err(Error::InsufficientData("empty series".into()));
    }
    let start = macro_series.quarters[0].max(deposit_quarters[0]);
    let end = *macro_series
        .quarters
        .last()
        .unwrap()
        .min(deposit_quarters.last().unwrap());
    if start > end {
        return Err(Error::InsufficientData(
            "macro and deposit series have no overlapping quarters".into(),
        ));
    }
    let m0 = (start.ordinal() - macro_series.quarters[0].ordinal()) as usize;
    let d0 = (start.ordinal() - deposit_quarters[0].ordinal()) as usize;
    let len = (end.ordinal() - start.ordinal() + 1) as usize;
    if len < 2 {
        return Err(Error::InsufficientData(
            "overlap of macro and deposit series is shorter than 2 quarters".into(),
        ));
    }

    let mut macro_diffs = Array2::zeros((len - 1, N_MACRO_FEATURES));
    for f in 0..N_MACRO_FEATURES {
        let d = qq_diff(&macro_series.feature(f)[m0..m0 + len])?;
        for (i, v) in d.into_iter().enumerate() {
            macro_diffs[[i, f]] = v;
        }
    }
    let mut target_diffs = Array2::zeros((len - 1, N_TARGETS));
    for (target, series) in [retail, wholesale].into_iter().enumerate() {
        let d = qq_diff(&series[d0..d0 + len])?;
        for (i, v) in d.into_iter().enumerate() {
            target_diffs[[i, target]] = v;
        }
    }
    // diff i covers quarter start+i+1
    let diff_quarters: Vec<Quarter> = (1..len)
        .map(|i| Quarter::from_ordinal(start.ordinal() + i as i64))
        .collect();
    build_design(&macro_diffs, &target_diffs, &diff_quarters, n_lags, include_current)
}

/// Least squares through the origin: `weights = argmin ||X W - Y||^2` with no
/// intercept, via modified Gram-Schmidt QR. Linearly dependent columns are
/// reported as an error.
pub fn fit_ols(x: &Array2<f64>, y: &Array2<f64>, n_lags: usize) -> Result<LagRegression> {
    let (n, k) = x.dim();
    if k != N_MACRO_FEATURES * n_lags {
        return Err(Error::Shape(format!(
            "design has {k} columns, expected {} for {n_lags} lags",
            N_MACRO_FEATURES * n_lags
        )));
    }
    if y.dim() != (n, N_TARGETS) {
        return Err(Error::Shape(format!(
            "targets are {:?}, expected ({n}, {N_TARGETS})",
            y.dim()
        )));
    }
    let mut q = x.to_owned();
    let mut r = Array2::<f64>::zeros((k, k));
    let mut dependent = Vec::new();
    for j in 0..k {
        let orig_norm = x.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..j {
            let dot = q.column(i).dot(&q.column(j));
            r[[i, j]] = dot;
            let qi = q.column(i).to_owned();
            let mut qj = q.column_mut(j);
            qj.zip_mut_with(&qi, |a, &b| *a -= dot * b);
        }
        let norm = q.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-10 * orig_norm.max(1e-300) || orig_norm == 0.0 {
            dependent.push(j);
            q.column_mut(j).fill(0.0);
        } else {
            r[[j, j]] = norm;
            q.column_mut(j).mapv_inplace(|v| v / norm);
        }
    }
    if !dependent.is_empty() {
        return Err(Error::RankDeficient(dependent));
    }

    let qty = q.t().dot(y); // [k, N_TARGETS]
    let mut weights = Array3::zeros((N_TARGETS, N_MACRO_FEATURES, n_lags));
    for target in 0..N_TARGETS {
        let mut w = vec![0.0; k];
        for j in (0..k).rev() {
            let mut v = qty[[j, target]];
            for m in j + 1..k {
                v -= r[[j, m]] * w[m];
            }
            w[j] = v / r[[j, j]];
        }
        for f in 0..N_MACRO_FEATURES {
            for lag in 0..n_lags {
                weights[[target, f, lag]] = w[f * n_lags + lag];
            }
        }
    }
    Ok(LagRegression { weights })
}

/// Lag-summed weights: rows retail, wholesale, total; columns reserves,
/// total loans, retail loans. Entries are dollar-per-dollar responses.
pub fn impact_table(model: &LagRegression) -> [[f64; N_MACRO_FEATURES]; 3] {
    let mut table = [[0.0; N_MACRO_FEATURES]; 3];
    for target in 0..N_TARGETS {
        for f in 0..N_MACRO_FEATURES {
            let sum: f64 = (0..model.n_lags()).map(|lag| model.weights[[target, f, lag]]).sum();
            table[target][f] = sum;
            table[2][f] += sum;
        }
    }
    table
}

/// Quarter intervals where year-over-year wholesale growth exceeded retail
/// growth by more than the full-sample mean plus one standard deviation of
/// the gap.
pub fn divergence_periods(
    quarters: &[Quarter],
    retail: &[f64],
    wholesale: &[f64],
) -> Result<Vec<(Quarter, Quarter)>> {
    let n = quarters.len();
    if retail.len() != n || wholesale.len() != n {
        return Err(Error::Shape("series lengths differ".into()));
    }
    if n < 5 {
        return Err(Error::InsufficientData(format!(
            "year-over-year differences need at least 5 quarters, got {n}"
        )));
    }
    let gap: Vec<f64> = (4..n)
        .map(|t| (wholesale[t] - wholesale[t - 4]) - (retail[t] - retail[t - 4]))
        .collect();
    let m = gap.iter().sum::<f64>() / gap.len() as f64;
    let var = gap.iter().map(|g| (g - m).powi(2)).sum::<f64>() / gap.len() as f64;
    let threshold = m + var.sqrt();

    let mut intervals = Vec::new();
    let mut open: Option<(Quarter, Quarter)> = None;
    for (i, &g) in gap.iter().enumerate() {
        let quarter = quarters[i + 4];
        if g > threshold {
            open = match open {
                Some((s, _)) => Some((s, quarter)),
                None => Some((quarter, quarter)),
            };
        } else if let Some(iv) = open.take() {
            intervals.push(iv);
        }
    }
    if let Some(iv) = open {
        intervals.push(iv);
    }
    Ok(intervals)
}
