//! The $500M branch-threshold baseline: deposits in branches below the
//! threshold count as retail, everything else as wholesale. Branch data also
//! selects the training subset (banks with at least one large branch).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::{Error, Result};

/// Default branch threshold in thousands of dollars ($500M).
pub const DEFAULT_BRANCH_THRESHOLD: f64 = 500_000.0;

pub const BRANCH_COLUMNS: [&str; 4] = ["bank_id", "year", "branch_id", "deposits"];

#[derive(Debug, Clone, PartialEq)]
pub struct BranchRecord {
    pub bank_id: String,
    pub year: i32,
    pub branch_id: String,
    /// Thousands of dollars.
    pub deposits: f64,
}

/// Retail/wholesale totals in thousands of dollars.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SplitTotals {
    pub retail: f64,
    pub wholesale: f64,
}

impl SplitTotals {
    pub fn total(&self) -> f64 {
        self.retail + self.wholesale
    }

    pub fn retail_fraction(&self) -> f64 {
        let total = self.total();
        if total == 0.0 {
            0.0
        } else {
            self.retail / total
        }
    }
}

/// Result of [`threshold_split`]: per-(year, bank) and industry-per-year
/// totals, keyed for deterministic iteration order.
#[derive(Debug, Clone, Default)]
pub struct ThresholdSplit {
    pub per_bank: BTreeMap<(i32, String), SplitTotals>,
    pub industry: BTreeMap<i32, SplitTotals>,
}

/// Classifies each branch: strictly below `threshold` is retail, at or above
/// is wholesale. Ordering of the input does not change any total beyond
/// floating-point associativity; with integer-valued deposits the sums are
/// exact.
pub fn threshold_split(branches: &[BranchRecord], threshold: f64) -> ThresholdSplit {
    let mut split = ThresholdSplit::default();
    for br in branches {
        let bank = split
            .per_bank
            .entry((br.year, br.bank_id.clone()))
            .or_default();
        let industry = split.industry.entry(br.year).or_default();
        if br.deposits < threshold {
            bank.retail += br.deposits;
            industry.retail += br.deposits;
        } else {
            bank.wholesale += br.deposits;
            industry.wholesale += br.deposits;
        }
    }
    split
}

/// Banks with at least one branch strictly over `threshold` in `year`; used
/// as the training-subset selector.
pub fn large_branch_banks(
    branches: &[BranchRecord],
    year: i32,
    threshold: f64,
) -> BTreeSet<String> {
    branches
        .iter()
        .filter(|b| b.year == year && b.deposits > threshold)
        .map(|b| b.bank_id.clone())
        .collect()
}

/// Parses a branch CSV with columns `bank_id, year, branch_id, deposits`.
pub fn parse_branch_csv(path: &Path) -> Result<Vec<BranchRecord>> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut col_idx = [0usize; 4];
    for (i, name) in BRANCH_COLUMNS.iter().enumerate() {
        col_idx[i] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| Error::MissingColumn {
                path: display.clone(),
                column: name.to_string(),
            })?;
    }
    let mut out = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row?;
        let row_no = line + 2;
        let get = |i: usize| row.get(col_idx[i]).unwrap_or("");
        let year: i32 = get(1).parse().map_err(|_| Error::ParseRow {
            path: display.clone(),
            row: row_no,
            msg: format!("column `year`: `{}` is not a year", get(1)),
        })?;
        let deposits: f64 = get(3).parse().map_err(|_| Error::ParseRow {
            path: display.clone(),
            row: row_no,
            msg: format!("column `deposits`: `{}` is not a number", get(3)),
        })?;
        if deposits < 0.0 {
            return Err(Error::InvalidRecord {
                path: display.clone(),
                row: row_no,
                msg: format!("negative deposits: {deposits}"),
            });
        }
        out.push(BranchRecord {
            bank_id: get(0).to_string(),
            year,
            branch_id: get(2).to_string(),
            deposits,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn branch(bank: &str, year: i32, id: &str, deposits: f64) -> BranchRecord {
        BranchRecord {
            bank_id: bank.into(),
            year,
            branch_id: id.into(),
            deposits,
        }
    }

    #[test]
    fn boundary_is_strictly_less_than() {
        let below = threshold_split(&[branch("a", 2019, "1", 499_999.0)], DEFAULT_BRANCH_THRESHOLD);
        assert_eq!(below.industry[&2019].retail, 499_999.0);
        assert_eq!(below.industry[&2019].wholesale, 0.0);

        let at = threshold_split(&[branch("a", 2019, "1", 500_000.0)], DEFAULT_BRANCH_THRESHOLD);
        assert_eq!(at.industry[&2019].retail, 0.0);
        assert_eq!(at.industry[&2019].wholesale, 500_000.0);
    }

    #[test]
    fn split_by_definition() {
        let split = threshold_split(
            &[branch("a", 2019, "1", 300_000.0), branch("a", 2019, "2", 600_000.0)],
            DEFAULT_BRANCH_THRESHOLD,
        );
        let totals = split.per_bank[&(2019, "a".to_string())];
        assert_eq!(totals.retail, 300_000.0);
        assert_eq!(totals.wholesale, 600_000.0);
        assert_eq!(totals.total(), 900_000.0);
    }

    #[test]
    fn selector_examples() {
        let branches = vec![
            branch("a", 2019, "1", 100_000.0),
            branch("b", 2019, "1", 600_000.0),
            branch("b", 2019, "2", 700_000.0),
            branch("c", 2018, "1", 900_000.0),
        ];
        assert!(large_branch_banks(&branches, 2019, 1e9).is_empty());
        let picked = large_branch_banks(&branches, 2019, DEFAULT_BRANCH_THRESHOLD);
        assert_eq!(picked.into_iter().collect::<Vec<_>>(), vec!["b".to_string()]);
        // boundary: exactly at the threshold is not "over"
        assert!(large_branch_banks(&[branch("x", 2019, "1", 500_000.0)], 2019, 500_000.0).is_empty());
    }

    #[test]
    fn selector_enumeration() {
        let mut branches = Vec::new();
        for i in 0..10 {
            let d = if i % 3 == 0 { 800_000.0 } else { 10_000.0 };
            branches.push(branch(&format!("bank{i}"), 2019, "1", d));
        }
        let picked = large_branch_banks(&branches, 2019, DEFAULT_BRANCH_THRESHOLD);
        let expected: BTreeSet<String> =
            ["bank0", "bank3", "bank6", "bank9"].iter().map(|s| s.to_string()).collect();
        assert_eq!(picked, expected);
    }

    proptest! {
        #[test]
        fn conservation_and_order_invariance(
            deposits in proptest::collection::vec(0u32..2_000_000, 1..60),
            shuffle_seed in 0u64..1000,
        ) {
            let branches: Vec<BranchRecord> = deposits
                .iter()
                .enumerate()
                .map(|(i, &d)| branch(&format!("b{}", i % 7), 2019, &format!("br{i}"), d as f64))
                .collect();
            let split = threshold_split(&branches, DEFAULT_BRANCH_THRESHOLD);

            // brute-force per-branch classification
            let retail: f64 = deposits.iter().filter(|&&d| (d as f64) < DEFAULT_BRANCH_THRESHOLD)
                .map(|&d| d as f64).sum();
            let total: f64 = deposits.iter().map(|&d| d as f64).sum();
            let industry = split.industry[&2019];
            prop_assert_eq!(industry.retail, retail);
            prop_assert_eq!(industry.retail + industry.wholesale, total);

            // order invariance
            let mut shuffled = branches.clone();
            let mut state = shuffle_seed;
            for i in (1..shuffled.len()).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let j = (state >> 33) as usize % (i + 1);
                shuffled.swap(i, j);
            }
            let split2 = threshold_split(&shuffled, DEFAULT_BRANCH_THRESHOLD);
            prop_assert_eq!(split2.industry[&2019], industry);
        }
    }
}
