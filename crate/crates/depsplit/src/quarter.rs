use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

/// Calendar quarter. The derived ordering is calendar order because the
/// fields are compared year first, then quarter number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Quarter {
    year: i32,
    q: u8,
}

impl Quarter {
    pub fn new(year: i32, q: u8) -> Result<Self> {
        if (1..=4).contains(&q) {
            Ok(Quarter { year, q })
        } else {
            Err(Error::InvalidQuarter(format!("{year}Q{q}")))
        }
    }

    pub fn year(self) -> i32 {
        self.year
    }

    pub fn q(self) -> u8 {
        self.q
    }

    /// Quarters elapsed since 0Q1; round-trips with [`Quarter::from_ordinal`].
    pub fn ordinal(self) -> i64 {
        self.year as i64 * 4 + (self.q as i64 - 1)
    }

    pub fn from_ordinal(ord: i64) -> Self {
        Quarter {
            year: ord.div_euclid(4) as i32,
            q: (ord.rem_euclid(4) + 1) as u8,
        }
    }

    /// The following quarter; (Y,4) rolls over to (Y+1,1).
    pub fn next(self) -> Self {
        Self::from_ordinal(self.ordinal() + 1)
    }
}

impl fmt::Display for Quarter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}Q{}", self.year, self.q)
    }
}

impl FromStr for Quarter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidQuarter(s.to_string());
        let (y, q) = s.split_once(['Q', 'q']).ok_or_else(bad)?;
        let year: i32 = y.trim().parse().map_err(|_| bad())?;
        let q: u8 = q.trim().parse().map_err(|_| bad())?;
        Quarter::new(year, q).map_err(|_| bad())
    }
}

/// Inclusive contiguous sequence of quarters from `start` to `end`.
pub fn quarter_range(start: Quarter, end: Quarter) -> Result<Vec<Quarter>> {
    if start > end {
        return Err(Error::InvalidQuarterRange { start, end });
    }
    Ok((start.ordinal()..=end.ordinal())
        .map(Quarter::from_ordinal)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(year: i32, q: u8) -> Quarter {
        Quarter::new(year, q).unwrap()
    }

    #[test]
    fn single_quarter_range() {
        assert_eq!(quarter_range(q(2000, 1), q(2000, 1)).unwrap(), vec![q(2000, 1)]);
    }

    #[test]
    fn year_rollover() {
        assert_eq!(
            quarter_range(q(2019, 4), q(2020, 1)).unwrap(),
            vec![q(2019, 4), q(2020, 1)]
        );
        assert_eq!(q(2019, 4).next(), q(2020, 1));
    }

    #[test]
    fn twenty_year_window_has_80_quarters() {
        // counted by enumeration: walk successor-by-successor and compare
        let range = quarter_range(q(2000, 1), q(2019, 4)).unwrap();
        let mut walked = vec![q(2000, 1)];
        while *walked.last().unwrap() < q(2019, 4) {
            walked.push(walked.last().unwrap().next());
        }
        assert_eq!(walked.len(), 80);
        assert_eq!(range, walked);
    }

    #[test]
    fn invalid_range_is_rejected() {
        let err = quarter_range(q(2020, 1), q(2019, 4)).unwrap_err();
        assert!(matches!(err, Error::InvalidQuarterRange { .. }));
    }

    #[test]
    fn invalid_quarter_number_is_rejected() {
        assert!(Quarter::new(2020, 0).is_err());
        assert!(Quarter::new(2020, 5).is_err());
    }

    #[test]
    fn display_and_parse_round_trip() {
        let quarter = q(2019, 4);
        assert_eq!(quarter.to_string(), "2019Q4");
        assert_eq!("2019Q4".parse::<Quarter>().unwrap(), quarter);
        assert!("2019".parse::<Quarter>().is_err());
        assert!("2019Q5".parse::<Quarter>().is_err());
    }

    #[test]
    fn ordering_is_calendar_order() {
        assert!(q(2009, 4) < q(2010, 1));
        assert!(q(2010, 1) < q(2010, 2));
    }

    proptest! {
        #[test]
        fn ordinal_round_trip(year in -200i32..3000, qn in 1u8..=4) {
            let quarter = q(year, qn);
            prop_assert_eq!(Quarter::from_ordinal(quarter.ordinal()), quarter);
        }

        #[test]
        fn range_length_matches_ordinals(a in 0i64..20_000, len in 0i64..600) {
            let start = Quarter::from_ordinal(a);
            let end = Quarter::from_ordinal(a + len);
            let range = quarter_range(start, end).unwrap();
            prop_assert_eq!(range.len() as i64, end.ordinal() - start.ordinal() + 1);
            // contiguity
            for w in range.windows(2) {
                prop_assert_eq!(w[0].next(), w[1]);
            }
        }
    }
}
